"""Acceptance gate: one test per criterion, each printing a pass line.

Run with ``pytest -v tests/test_acceptance.py``; each test is independent
and states its own tolerances inline.
"""

from __future__ import annotations

import math
import random
import time

import numpy as np
import pytest

from anomrl.data import (
    DatasetError,
    LETTERS,
    QuestionKind,
    Taxonomy,
    VideoMeta,
    instantiate_questions,
    load_records,
)
from anomrl.grammar import (
    ParseError,
    ParseErrorClass,
    RiskLevel,
    StructuredResponse,
    TemporalInterval,
    parse_response,
    render_response,
)
from anomrl.grpo import (
    CategoricalSequencePolicy,
    Completion,
    GrpoConfig,
    RolloutGroup,
    SftBatch,
    compute_advantages,
    finite_diff_check,
    grpo_objective,
    grpo_objective_and_grad,
    sft_loss,
    sft_loss_and_grad,
    train_sft,
)
from anomrl.metrics import (
    EvalRecord,
    bleu,
    depth_alignment,
    joint_outcomes,
    meteor_basic,
    risk_correct,
    rouge,
)
from anomrl.oracle import CallableOracle
from anomrl.rewards import (
    RewardBreakdown,
    RewardConfig,
    VideoTimeline,
    depth_reward,
    excise_interval,
    risk_reward,
    token_f1,
    total_reward,
    verification_reward,
)
from anomrl.simenv import (
    CorpusSpec,
    ToyPolicy,
    ToyPolicySpec,
    build_context,
    generate_corpus,
    observe,
    sft_batches,
)
from anomrl.train import train_rl

from conftest import random_response
from test_simenv import SMALL_TAX


def _pass(number: int, detail: str) -> None:
    print(f"criterion {number}: PASS ({detail})")


def _breakdown(total):
    return RewardBreakdown(0, 0, 0, 0, 0, total=total)


# -- criterion 1: gradient fidelity ------------------------------------------


def test_criterion_1_gradient_fidelity(library):
    started = time.time()
    spec = ToyPolicySpec.from_taxonomy(SMALL_TAX)
    assert spec.n_parameters >= 50
    videos, records = generate_corpus(
        CorpusSpec(counts={"normal": 2, "Fighting": 2, "Riot": 2}),
        SMALL_TAX, library, 0,
    )
    q = records[0]
    context = build_context(spec, observe(videos[q.video_id]), q)
    gen = np.random.default_rng(0)
    policy = ToyPolicy(spec, gen.normal(size=spec.n_parameters) * 0.3)

    tokens, _ = policy.sample(context, random.Random(0))
    batch = SftBatch(context=context, targets=tuple(tokens))
    sft_err = finite_diff_check(
        lambda t: sft_loss(policy.with_parameters(t), batch),
        lambda t: sft_loss_and_grad(policy.with_parameters(t), batch)[1],
        policy.parameters(),
        h=1e-6,
    )
    assert sft_err < 1e-5

    old = ToyPolicy(spec, gen.normal(size=spec.n_parameters) * 0.3)
    ref = ToyPolicy(spec, gen.normal(size=spec.n_parameters) * 0.3)
    rng = random.Random(1)
    completions = []
    for reward in (0.0, 1.0, 2.0, 3.0):
        toks, lps = old.sample(context, rng)
        completions.append(Completion(tokens=tuple(toks), old_log_probs=lps,
                                      text="", breakdown=_breakdown(reward)))
    group = RolloutGroup(question=q, context=context, completions=completions)
    group.populate_advantages()
    cfg = GrpoConfig(group_size=4, clip_epsilon=0.2, kl_beta=0.04)
    grpo_err = finite_diff_check(
        lambda t: grpo_objective(group, policy.with_parameters(t), old, ref, cfg),
        lambda t: grpo_objective_and_grad(
            group, policy.with_parameters(t), old, ref, cfg)[1],
        policy.parameters(),
        h=1e-6,
    )
    assert grpo_err < 1e-5
    elapsed = time.time() - started
    assert elapsed < 60.0
    _pass(1, f"{spec.n_parameters} params, sft err {sft_err:.2e}, "
             f"grpo err {grpo_err:.2e}, {elapsed:.1f}s")


# -- criterion 2: advantage normalization properties --------------------------


def test_criterion_2_advantage_properties():
    rng = random.Random(0)
    checked = 0
    for _ in range(1000):
        g = rng.randint(2, 8)
        rewards = [rng.uniform(-4, 4) for _ in range(g)]
        adv = compute_advantages(rewards)
        if np.asarray(rewards).std() > 1e-6:
            assert abs(adv.mean()) < 1e-9
            assert abs(adv.std() - 1.0) < 1e-9
            checked += 1
        shift = compute_advantages([r + 11.25 for r in rewards])
        scale = compute_advantages([2.5 * r for r in rewards])
        np.testing.assert_allclose(shift, adv, atol=1e-9)
        np.testing.assert_allclose(scale, adv, atol=1e-9)
    assert compute_advantages([3.0, 3.0, 3.0]).tolist() == [0.0, 0.0, 0.0]
    _pass(2, f"{checked} non-degenerate groups normalized; invariances hold")


# -- criterion 3: clipped-objective mechanics ----------------------------------


def _single_completion_group(old, token, advantage):
    completions = [Completion(
        tokens=(token,), old_log_probs=old.log_prob(None, [token]),
        text="", breakdown=_breakdown(0.0),
    )]
    group = RolloutGroup(question=None, context=None, completions=completions)
    group.advantages = np.array([advantage])
    return group


def test_criterion_3_objective_mechanics():
    eps = 0.2
    cfg = GrpoConfig(group_size=2, clip_epsilon=eps, kl_beta=0.0)

    # Positive advantage, ratio above 1+eps: value pins to (1+eps)*A and the
    # finite-difference derivative through the logits is zero (flat clip).
    old = CategoricalSequencePolicy(np.log([[0.2, 0.8]]))
    new = CategoricalSequencePolicy(np.log([[0.5, 0.5]]))
    group = _single_completion_group(old, 0, +1.0)
    value = grpo_objective(group, new, old, old, cfg)
    assert value == pytest.approx((1 + eps) * 1.0, abs=1e-12)
    flat = finite_diff_check(
        lambda t: grpo_objective(group, new.with_parameters(t), old, old, cfg),
        lambda t: np.zeros_like(t),
        new.parameters(),
    )
    assert flat < 1e-9

    # Negative advantage, ratio below 1-eps: pins to (1-eps)*A, also flat.
    old = CategoricalSequencePolicy(np.log([[0.8, 0.2]]))
    new = CategoricalSequencePolicy(np.log([[0.5, 0.5]]))
    group = _single_completion_group(old, 0, -1.0)
    value = grpo_objective(group, new, old, old, cfg)
    assert value == pytest.approx((1 - eps) * -1.0, abs=1e-12)
    flat = finite_diff_check(
        lambda t: grpo_objective(group, new.with_parameters(t), old, old, cfg),
        lambda t: np.zeros_like(t),
        new.parameters(),
    )
    assert flat < 1e-9

    # KL(p, p) = 0 and KL >= 0 across 1k random policy pairs.
    gen = np.random.default_rng(7)
    for _ in range(1000):
        p = CategoricalSequencePolicy(gen.normal(size=(2, 4)))
        q = CategoricalSequencePolicy(gen.normal(size=(2, 4)))
        kl_pq, _ = p.kl_and_grad(None, [0, 0], q)
        kl_pp, _ = p.kl_and_grad(None, [0, 0], p)
        assert kl_pq >= 0.0
        assert abs(kl_pp) < 1e-12

    # Exhaustive enumeration equals Monte Carlo within 3 standard errors on
    # a 2-token / 3-symbol policy.
    old = CategoricalSequencePolicy(gen.normal(size=(2, 3)))
    new = CategoricalSequencePolicy(
        old.parameters().reshape(2, 3) + 0.1 * gen.normal(size=(2, 3))
    )
    cfg = GrpoConfig(group_size=2, clip_epsilon=eps, kl_beta=0.04)

    def objective_for(tok_a, tok_b):
        completions = [
            Completion(tokens=tuple(t), old_log_probs=old.log_prob(None, t),
                       text="", breakdown=_breakdown(float(sum(t))))
            for t in (tok_a, tok_b)
        ]
        group = RolloutGroup(question=None, context=None,
                             completions=completions)
        group.populate_advantages()
        return grpo_objective(group, new, old, old, cfg)

    pairs = list(old.enumerate_sequences())
    exact = sum(pa * pb * objective_for(ta, tb)
                for ta, pa in pairs for tb, pb in pairs)
    rng = random.Random(0)
    samples = np.array([
        objective_for(old.sample(None, rng)[0], old.sample(None, rng)[0])
        for _ in range(10_000)
    ])
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    assert abs(samples.mean() - exact) < 3 * se
    _pass(3, f"clip pins verified; enumeration gap "
             f"{abs(samples.mean() - exact):.2e} < 3 SE ({3 * se:.2e})")


# -- criterion 4: grammar robustness -------------------------------------------


def test_criterion_4_grammar(lexicon):
    rng = random.Random(2024)
    for _ in range(10_000):
        resp = random_response(rng, lexicon)
        raw = render_response(resp)
        assert parse_response(raw, lexicon) == resp

    pieces = (
        "<think>", "</think>", "<answer>", "</answer>", "<perception>",
        "</perception>", "<cognition>", "</cognition>", "<action>",
        "</action>", "<which>", "</which>", "<when>", "</when>",
        "<risk>", "</risk>", "Fighting", "normal", "Low", "0.5", ",", " ", "z",
    )
    for i in range(100_000):
        if i % 10 == 0:
            raw = "".join(rng.choice(pieces) for _ in range(rng.randint(0, 50)))
        else:
            raw = rng.randbytes(rng.randint(0, 4096)).decode("latin-1")
        assert len(raw.encode("latin-1")) <= 4096 or i % 10 == 0
        outcome = parse_response(raw, lexicon)
        assert isinstance(outcome, (StructuredResponse, ParseError))
        if isinstance(outcome, ParseError):
            assert isinstance(outcome.error_class, ParseErrorClass)

    def err_class(raw):
        outcome = parse_response(raw, lexicon)
        assert isinstance(outcome, ParseError)
        return outcome.error_class

    assert err_class(
        "<think><cognition>a<which>normal</which></cognition>"
        "<perception>b</perception></think><answer>x</answer>"
    ) == ParseErrorClass.STAGE_ORDERING
    assert err_class(
        "<think><cognition>a<which>Fighting</which><when>0.9,0.1</when>"
        "</cognition></think><answer>x</answer>"
    ) == ParseErrorClass.BAD_INTERVAL
    assert err_class(
        "<think><action>a<risk>extreme</risk></action></think><answer>x</answer>"
    ) == ParseErrorClass.BAD_RISK
    _pass(4, "10k round trips, 100k fuzz inputs, named rejections")


# -- criterion 5: reward protocol -----------------------------------------------


def test_criterion_5_reward_protocol(lexicon):
    cfg = RewardConfig()
    video = VideoTimeline(tuple((f"f{i}", i / 10) for i in range(11)))
    normal_reply = (
        "<think><cognition>n<which>normal</which></cognition></think>"
        "<answer>normal</answer>"
    )
    abnormal_reply = (
        "<think><cognition>a<which>Fighting</which>"
        "<when>0.100000,0.900000</when></cognition></think><answer>a</answer>"
    )
    abnormal_pred = parse_response(
        "<think><cognition>x<which>Fighting</which><when>0.2,0.6</when>"
        "</cognition></think><answer>x</answer>", lexicon,
    )
    normal_pred = parse_response(
        "<think><cognition>x<which>normal</which></cognition></think>"
        "<answer>x</answer>", lexicon,
    )

    def verify(pred, reply):
        return verification_reward(
            pred, video, CallableOracle(lambda t, q, g: reply),
            random.Random(0), cfg, lexicon, "q",
        )

    table = (
        verify(abnormal_pred, normal_reply),    # flip to normal
        verify(abnormal_pred, abnormal_reply),  # stays abnormal
        verify(normal_pred, abnormal_reply),    # flip to abnormal
        verify(normal_pred, normal_reply),      # stays normal
    )
    assert table == (1.0, 0.0, -1.0, 0.0)

    for expected in (1, 2, 3):
        for pred in (0, 1, 2, 3):
            value = depth_reward(pred, expected, True)
            assert (value == 1.0) == (pred == expected)

    by_distance = [
        risk_reward(RiskLevel.HIGH, RiskLevel.HIGH, cfg),
        risk_reward(RiskLevel.MEDIUM, RiskLevel.HIGH, cfg),
        risk_reward(RiskLevel.LOW, RiskLevel.HIGH, cfg),
    ]
    assert by_distance[0] > by_distance[1] > by_distance[2]

    assert abs(token_f1("a fight breaks out", "a fight starts") - 4 / 7) < 1e-9
    assert abs(depth_reward(1, 3, True) - 0.0) < 1e-9
    assert abs(risk_reward(RiskLevel.MEDIUM, RiskLevel.HIGH, cfg) - 0.3) < 1e-9
    trimmed = excise_interval(
        VideoTimeline((("a", 0.1), ("b", 0.3), ("c", 0.5), ("d", 0.7), ("e", 0.9))),
        TemporalInterval(0.25, 0.65),
    )
    assert trimmed.tokens == ("a", "d", "e")
    composed = total_reward(RewardBreakdown(1.0, 4 / 7, 1.0, 0.3, 0.0), cfg)
    assert abs(composed - (1 + 4 / 7 + 1.3)) < 1e-9
    _pass(5, "verification table {+1, 0, -1, 0}; worked numerics within 1e-9")


# -- criterion 6: desk-scale pipeline -------------------------------------------


def test_criterion_6_pipeline(taxonomy, library, lexicon):
    started = time.time()
    counts = {"normal": 80}
    leaves = taxonomy.leaves()
    for i in range(120):
        leaf = leaves[i % len(leaves)]
        counts[leaf] = counts.get(leaf, 0) + 1
    assert sum(counts.values()) == 200
    videos, records = generate_corpus(
        CorpusSpec(counts=counts), taxonomy, library, 0
    )
    spec = ToyPolicySpec.from_taxonomy(taxonomy)
    batches = sft_batches(records, videos, spec)
    sft_policy, _ = train_sft(
        ToyPolicy(spec), batches,
        GrpoConfig(steps=300, learning_rate=0.02, batch_size=32),
        random.Random(0),
    )
    rl_cfg = GrpoConfig(steps=500, group_size=4, learning_rate=0.6,
                        kl_beta=0.04, batch_size=32)
    rcfg = RewardConfig()
    rl_policy, trace = train_rl(
        sft_policy, records, videos, lexicon, rcfg, rl_cfg, random.Random(0)
    )
    _, rl_only_trace = train_rl(
        ToyPolicy(spec), records, videos, lexicon, rcfg, rl_cfg, random.Random(0)
    )

    totals = [row["mean_total_reward"] for row in trace]
    first50 = float(np.mean(totals[:50]))
    last50 = float(np.mean(totals[-50:]))
    improvement = (last50 - first50) / first50
    assert improvement >= 0.25, (first50, last50)

    test_split = [q for q in records if q.split == "test"]
    evals = []
    for q in test_split:
        context = build_context(spec, observe(videos[q.video_id]), q)
        tokens, _ = rl_policy.act(context, random.Random(0), greedy=True)
        raw = render_response(rl_policy.decode(context, tokens))
        evals.append(EvalRecord(question=q, outcome=parse_response(raw, lexicon)))
    action = [e for e in evals if e.question.gold_risk is not None]
    risk_acc = sum(risk_correct(e) for e in action) / len(action)
    depth_acc = depth_alignment(evals)
    assert risk_acc >= 0.9, risk_acc
    assert depth_acc >= 0.9, depth_acc

    rl_only_last50 = float(np.mean(
        [row["mean_total_reward"] for row in rl_only_trace][-50:]
    ))
    assert last50 > rl_only_last50, (last50, rl_only_last50)

    elapsed = time.time() - started
    assert elapsed < 300.0
    _pass(6, f"improvement {improvement:.1%}, risk {risk_acc:.2f}, "
             f"depth {depth_acc:.2f}, sft-init {last50:.2f} > "
             f"rl-only {rl_only_last50:.2f}, {elapsed:.0f}s")


# -- criterion 7: metrics fixtures ---------------------------------------------


def test_criterion_7_metrics():
    fixtures = [
        (bleu("the cat sat", "the cat sat", 4), 1.0),
        (bleu("alpha beta", "gamma delta", 1), 0.0),
        (bleu("the cat sat", "the cat sat down", 1), math.exp(1 - 4 / 3)),
        (bleu("the cat sat", "the cat sat down", 2), math.exp(1 - 4 / 3)),
        (rouge("a b c", "a b c", "N2")[2], 1.0),
        (rouge("a b c", "a b d", "N2")[2], 0.5),
        (rouge("a b", "c d", "L")[2], 0.0),
        (rouge("a b c d", "a c b d", "L")[2], 0.75),
        (meteor_basic("a b", "a b"), 0.9375),
        (meteor_basic("cat", "cat"), 0.5),
    ]
    for got, expected in fixtures:
        assert abs(got - expected) < 1e-6, (got, expected)

    rng = random.Random(0)
    flags = [
        (rng.random() < 0.6, rng.random() < 0.5,
         rng.random() < 0.5 if rng.random() < 0.8 else None)
        for _ in range(500)
    ]
    report = joint_outcomes(flags)
    assert abs(report.rr + report.rw + report.wr + report.ww - 1.0) < 1e-12

    strict = joint_outcomes([
        (True, True, True), (True, True, False),
        (False, False, False), (False, False, True),
    ])
    assert strict.rrr <= strict.rr
    assert strict.www <= strict.ww

    published = joint_outcomes(
        [(True, True, None)] * 571 + [(True, False, None)] * 252
        + [(False, True, None)] * 87 + [(False, False, None)] * 90
    )
    rendered = [f"{v:.3f}" for v in
                (published.rr, published.rw, published.wr, published.ww)]
    assert rendered == ["0.571", "0.252", "0.087", "0.090"]
    assert f"{sum(map(float, rendered)):.3f}" == "1.000"
    _pass(7, "10 fixtures within 1e-6; partitions exact; published row renders")


# -- criterion 8: dataset validation and instantiation ---------------------------


def test_criterion_8_dataset(fixtures_dir, taxonomy, library):
    records = load_records(fixtures_dir / "golden.jsonl", taxonomy)
    assert len(records) == 12

    violations = {
        "bad_mcq_fields.jsonl": "mcq_fields",
        "bad_open_fields.jsonl": "open_fields",
        "bad_interval_presence.jsonl": "interval_presence",
        "bad_risk_presence.jsonl": "risk_presence",
        "bad_split.jsonl": "bad_split",
        "bad_cot_presence.jsonl": "cot_presence",
        "bad_unknown_category.jsonl": "unknown_category",
        "bad_interval.jsonl": "bad_interval",
    }
    for name, code in violations.items():
        with pytest.raises(DatasetError) as info:
            load_records(fixtures_dir / name, taxonomy)
        assert code in str(info.value), name

    meta = VideoMeta("v0", "Fighting", TemporalInterval(0.2, 0.6), RiskLevel.HIGH)
    rng = random.Random(0)
    first = instantiate_questions(meta, library, taxonomy, rng)
    assert len(first) == 6
    assert {q.kind for q in first} == set(QuestionKind)

    trials = 10_000
    counts = {letter: 0 for letter in LETTERS}
    for _ in range(trials):
        batch = instantiate_questions(meta, library, taxonomy, rng)
        mcq = next(q for q in batch if q.kind == QuestionKind.PERCEPTION_MCQ)
        counts[mcq.gold_letter] += 1
    freqs = {k: v / trials for k, v in counts.items()}
    for letter in LETTERS:
        assert abs(freqs[letter] - 0.25) < 0.02, freqs
    _pass(8, f"golden accepted, 8 violations named, letter freqs {freqs}")
