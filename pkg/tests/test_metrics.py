from __future__ import annotations

import math

import pytest

from anomrl.data import load_records
from anomrl.grammar import parse_response
from anomrl.metrics import (
    EvalRecord,
    bleu,
    category_correct,
    depth_alignment,
    joint_outcomes,
    mcq_accuracy,
    meteor_basic,
    risk_correct,
    rouge,
    stage_report,
)


class TestBleu:
    def test_identical(self):
        for n in (1, 2, 3, 4):
            assert bleu("the cat sat", "the cat sat", max_n=n) == pytest.approx(1.0)

    def test_disjoint(self):
        assert bleu("alpha beta", "gamma delta", max_n=1) == 0.0

    def test_brevity_penalty_worked_example(self):
        value = bleu("the cat sat", "the cat sat down", max_n=1)
        assert value == pytest.approx(math.exp(1 - 4 / 3), abs=1e-6)

    def test_exact_precisions_bypass_smoothing(self):
        value = bleu("the cat sat", "the cat sat down", max_n=2)
        assert value == pytest.approx(math.exp(1 - 4 / 3), abs=1e-6)

    def test_empty_candidate(self):
        assert bleu("", "anything") == 0.0

    def test_max_n_validated(self):
        with pytest.raises(ValueError):
            bleu("a", "a", max_n=5)


class TestRouge:
    def test_identical_n2(self):
        assert rouge("a b c", "a b c", "N2") == (1.0, 1.0, 1.0)

    def test_n2_worked_example(self):
        p, r, f1 = rouge("a b c", "a b d", "N2")
        assert (p, r, f1) == pytest.approx((0.5, 0.5, 0.5), abs=1e-6)

    def test_disjoint_lcs(self):
        assert rouge("a b", "c d", "L") == (0.0, 0.0, 0.0)

    def test_lcs_worked_example(self):
        p, r, f1 = rouge("a b c d", "a c b d", "L")
        assert (p, r, f1) == pytest.approx((0.75, 0.75, 0.75), abs=1e-6)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            rouge("a", "a", "N3")


class TestMeteor:
    def test_two_word_identity(self):
        assert meteor_basic("a b", "a b") == pytest.approx(0.9375, abs=1e-6)

    def test_single_word_identity(self):
        assert meteor_basic("cat", "cat") == pytest.approx(0.5, abs=1e-6)

    def test_disjoint(self):
        assert meteor_basic("a b", "c d") == 0.0

    def test_reordering_increases_chunks(self):
        in_order = meteor_basic("a b c d", "a b c d")
        shuffled = meteor_basic("d c b a", "a b c d")
        assert shuffled < in_order


def _flags(*triples):
    return list(triples)


class TestJoint:
    def test_triple_right_counts(self):
        report = joint_outcomes(_flags((True, True, True)))
        assert report.counts["RR"] == 1
        assert report.counts["RRR"] == 1
        assert report.rr == 1.0 and report.rrr == 1.0

    def test_partition_sums_to_one(self):
        flags = _flags(
            (True, True, True), (True, False, False),
            (False, True, None), (False, False, False),
        )
        report = joint_outcomes(flags)
        assert report.rr + report.rw + report.wr + report.ww == pytest.approx(
            1.0, abs=1e-12
        )
        # A record without a category flag suppresses the triple fractions.
        assert report.rrr is None and report.www is None

    def test_triples_bounded_by_pairs(self):
        flags = _flags(
            (True, True, True), (True, True, False),
            (False, False, False), (False, False, True),
        )
        report = joint_outcomes(flags)
        assert report.rrr <= report.rr
        assert report.www <= report.ww

    def test_published_row_renders_to_one(self):
        # 1000 records split 571/252/87/90 across the four quadrants.
        flags = (
            [(True, True, None)] * 571 + [(True, False, None)] * 252
            + [(False, True, None)] * 87 + [(False, False, None)] * 90
        )
        report = joint_outcomes(flags)
        assert report.rr == pytest.approx(0.571)
        assert report.rw == pytest.approx(0.252)
        assert report.wr == pytest.approx(0.087)
        assert report.ww == pytest.approx(0.090)
        total = report.rr + report.rw + report.wr + report.ww
        assert f"{total:.3f}" == "1.000"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            joint_outcomes([])


def _eval_records(fixtures_dir, taxonomy, lexicon, perfect=True):
    records = load_records(fixtures_dir / "golden.jsonl", taxonomy)
    out = []
    for q in records:
        from anomrl.data import build_gold_response
        from anomrl.grammar import render_response

        if perfect:
            raw = render_response(build_gold_response(q))
        else:
            raw = "garbage"
        out.append(EvalRecord(question=q, outcome=parse_response(raw, lexicon)))
    return out


class TestAggregates:
    def test_mcq_accuracy_fractions(self, fixtures_dir, taxonomy, lexicon):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        mcq = [e for e in evals if e.question.kind.is_mcq]
        assert mcq_accuracy(mcq) == 1.0

    def test_mcq_accuracy_rejects_open(self, fixtures_dir, taxonomy, lexicon):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        with pytest.raises(ValueError):
            mcq_accuracy(evals)

    def test_depth_alignment_perfect(self, fixtures_dir, taxonomy, lexicon):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        assert depth_alignment(evals) == 1.0

    def test_depth_alignment_errors_are_misaligned(
        self, fixtures_dir, taxonomy, lexicon
    ):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon, perfect=False)
        assert depth_alignment(evals) == 0.0

    def test_partial_alignment(self, fixtures_dir, taxonomy, lexicon):
        good = _eval_records(fixtures_dir, taxonomy, lexicon)
        bad = _eval_records(fixtures_dir, taxonomy, lexicon, perfect=False)
        mixed = good[:2] + bad[:3]
        assert depth_alignment(mixed) == pytest.approx(0.4)

    def test_stage_report_from_gold(self, fixtures_dir, taxonomy, lexicon):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        report = stage_report(evals)
        assert report.category_accuracy == 1.0
        assert report.risk_accuracy == 1.0
        # No judge attached: judged rubrics are absent.
        assert report.identification is None

    def test_stage_report_with_surrogate_judge(
        self, fixtures_dir, taxonomy, lexicon
    ):
        class CategoryJudge:
            def assess(self, response, gold, rubric):
                rec = EvalRecord(question=gold,
                                 outcome=parse_response(response, lexicon))
                return 1.0 if category_correct(rec) else 0.0

        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        report = stage_report(evals, CategoryJudge())
        assert report.interpretation == report.category_accuracy

    def test_risk_accuracy_absent_without_action(
        self, fixtures_dir, taxonomy, lexicon
    ):
        evals = [
            e for e in _eval_records(fixtures_dir, taxonomy, lexicon)
            if e.question.kind.dimension.depth < 3
        ]
        assert stage_report(evals).risk_accuracy is None

    def test_risk_correct_flags(self, fixtures_dir, taxonomy, lexicon):
        evals = _eval_records(fixtures_dir, taxonomy, lexicon)
        action = [e for e in evals if e.question.gold_risk is not None]
        assert all(risk_correct(e) for e in action)
