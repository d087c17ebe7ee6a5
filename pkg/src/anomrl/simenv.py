"""Desk-scale synthetic world: symbolic videos with planted anomaly
segments, uniform frame-sampling observation, and a differentiable toy
policy whose emissions are grammar-valid by construction.

The toy policy is a set of linear-softmax heads over a shared feature
vector (symbol fractions, question-kind one-hot, per-choice match
indicators, bias). A completion is the sequence of head choices; its
log-probability is the sum of the factor log-probabilities.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import (
    LETTERS,
    QuestionRecord,
    STAGE_TEXTS,
    Taxonomy,
    TemplateLibrary,
    VideoMeta,
    canonical_open_answer,
    instantiate_questions,
)
from .grammar import (
    NORMAL_CATEGORY,
    AnomalyJudgment,
    QuestionKind,
    RiskLevel,
    StageKind,
    StructuredResponse,
    TemporalInterval,
    expected_depth,
    normalize_category,
    render_response,
)
from .grpo import DifferentiablePolicy, SftBatch
from .rewards import VideoTimeline

__all__ = [
    "NORMAL_SYMBOLS",
    "SyntheticVideo",
    "FeatureVector",
    "CorpusSpec",
    "PolicyContext",
    "ToyPolicySpec",
    "ToyPolicy",
    "generate_corpus",
    "timeline",
    "observe",
    "build_context",
    "sample_structured",
    "encode_gold_tokens",
    "sft_batches",
    "symbol_for_category",
]

NORMAL_SYMBOLS = ("ambient", "walking", "standing")
N_BUCKETS = 20  # <when> quantization grid of 0.05


def symbol_for_category(category: str) -> str:
    return normalize_category(category).replace(" ", "_")


@dataclass(frozen=True)
class SyntheticVideo:
    id: str
    frames: Tuple[str, ...]
    anomaly: Optional[Tuple[str, TemporalInterval]] = None
    risk: Optional[RiskLevel] = None

    def __post_init__(self) -> None:
        if len(self.frames) < 2:
            raise ValueError("synthetic videos need at least 2 frames")
        if (self.anomaly is None) != (self.risk is None):
            raise ValueError("risk must be present iff an anomaly is planted")


def timeline(video: SyntheticVideo) -> VideoTimeline:
    n = len(video.frames)
    return VideoTimeline(
        tuple((sym, i / (n - 1)) for i, sym in enumerate(video.frames))
    )


@dataclass(frozen=True)
class FeatureVector:
    counts: Dict[str, int]
    n_sampled: int
    # Normalized timestamps of the first/last sampled non-background frame,
    # when any was sampled.
    anomaly_span: Optional[Tuple[float, float]] = None


def observe(video, budget: int = 16) -> FeatureVector:
    """Uniformly sample up to ``budget`` frames and tally their symbols."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if isinstance(video, SyntheticVideo):
        symbols: Sequence[str] = video.frames
        n = len(symbols)
        timestamps = [i / (n - 1) for i in range(n)]
    else:
        symbols = video.tokens
        timestamps = list(video.timestamps)
    n = len(symbols)
    if n <= budget:
        indices = range(n)
    elif budget == 1:
        indices = [0]
    else:
        indices = [round(k * (n - 1) / (budget - 1)) for k in range(budget)]
    counts: Dict[str, int] = {}
    span = None
    for i in indices:
        counts[symbols[i]] = counts.get(symbols[i], 0) + 1
        if symbols[i] not in NORMAL_SYMBOLS:
            ts = timestamps[i]
            span = (ts, ts) if span is None else (span[0], ts)
    return FeatureVector(counts=counts, n_sampled=len(list(indices)),
                         anomaly_span=span)


@dataclass(frozen=True)
class CorpusSpec:
    """Counts per category label ("normal" allowed), plus shape knobs."""

    counts: Dict[str, int]
    frames_range: Tuple[int, int] = (24, 40)
    anomaly_buckets: Tuple[int, int] = (3, 10)  # interval length in 0.05 buckets
    split_fractions: Tuple[float, float] = (0.4, 0.4)  # sft, rl; rest is test

    def __post_init__(self) -> None:
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("per-category counts must be >= 1")
        lo, hi = self.anomaly_buckets
        if not (1 <= lo <= hi <= N_BUCKETS // 2):
            raise ValueError("anomaly length range infeasible for the bucket grid")
        # Frame spacing must not exceed the shortest interval, so every
        # planted anomaly covers at least one frame.
        if (self.frames_range[0] - 1) * lo < N_BUCKETS:
            raise ValueError("frame count too small for the anomaly length range")


def generate_corpus(
    spec: CorpusSpec,
    taxonomy: Taxonomy,
    lib: TemplateLibrary,
    seed: int,
) -> Tuple[Dict[str, SyntheticVideo], List[QuestionRecord]]:
    """Deterministic synthetic corpus: videos plus six questions per video."""
    rng = random.Random(seed)
    metas: List[Tuple[SyntheticVideo, VideoMeta]] = []
    serial = 0
    for category in sorted(spec.counts):
        if not (normalize_category(category) == NORMAL_CATEGORY or taxonomy.contains(category)):
            raise ValueError(f"unknown category in corpus spec: {category!r}")
        for _ in range(spec.counts[category]):
            video_id = f"v{serial:05d}"
            serial += 1
            n = rng.randint(*spec.frames_range)
            if normalize_category(category) == NORMAL_CATEGORY:
                frames = tuple(rng.choice(NORMAL_SYMBOLS) for _ in range(n))
                video = SyntheticVideo(video_id, frames)
                meta = VideoMeta(video_id, NORMAL_CATEGORY)
            else:
                b_len = rng.randint(*spec.anomaly_buckets)
                b_start = rng.randint(0, N_BUCKETS - b_len)
                interval = TemporalInterval(b_start / N_BUCKETS, (b_start + b_len) / N_BUCKETS)
                symbol = symbol_for_category(category)
                frames = tuple(
                    symbol if interval.start <= i / (n - 1) <= interval.end
                    else rng.choice(NORMAL_SYMBOLS)
                    for i in range(n)
                )
                risk = taxonomy.risk_for(category)
                video = SyntheticVideo(video_id, frames, (category, interval), risk)
                meta = VideoMeta(video_id, category, interval, risk)
            metas.append((video, meta))

    order = list(range(len(metas)))
    rng.shuffle(order)
    n_sft = round(spec.split_fractions[0] * len(metas))
    n_rl = round(spec.split_fractions[1] * len(metas))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "sft" if rank < n_sft else ("rl" if rank < n_sft + n_rl else "test")

    videos: Dict[str, SyntheticVideo] = {}
    records: List[QuestionRecord] = []
    for idx, (video, meta) in enumerate(metas):
        videos[video.id] = video
        records.extend(
            instantiate_questions(meta, lib, taxonomy, rng, split=split_of[idx])
        )
    return videos, records


# ---------------------------------------------------------------------------
# Toy policy
# ---------------------------------------------------------------------------

_KIND_ORDER = tuple(QuestionKind)

# Head identifiers, in parameter-layout order.
_H_DEPTH = 0
_H_CATEGORY = 1
_H_START = 2
_H_END = 3
_H_RISK = 4
_H_LETTER = 5
_H_TPL_P = 6
_H_TPL_C = 7
_H_TPL_A = 8
_TPL_HEAD = {
    StageKind.PERCEPTION: _H_TPL_P,
    StageKind.COGNITION: _H_TPL_C,
    StageKind.ACTION: _H_TPL_A,
}


@dataclass(frozen=True)
class ToyPolicySpec:
    """Fixed shape of a toy policy: category order, lexicon, head sizes."""

    categories: Tuple[str, ...]  # index 0 is "normal"
    symbols: Tuple[str, ...]

    @classmethod
    def from_taxonomy(cls, taxonomy: Taxonomy) -> "ToyPolicySpec":
        leaves = taxonomy.leaves()
        return cls(
            categories=(NORMAL_CATEGORY,) + leaves,
            symbols=NORMAL_SYMBOLS + tuple(symbol_for_category(c) for c in leaves),
        )

    @property
    def feature_dim(self) -> int:
        # symbol fractions + dominant-category one-hot + observed anomaly
        # start/end bucket one-hots + kind one-hot + per-choice match
        # indicators + bias
        return (len(self.symbols) + len(self.categories) + 2 * N_BUCKETS
                + len(_KIND_ORDER) + len(LETTERS) + 1)

    @property
    def head_sizes(self) -> Tuple[int, ...]:
        tpl = tuple(len(STAGE_TEXTS[k]) for k in
                    (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION))
        return (3, len(self.categories), N_BUCKETS, N_BUCKETS, 3, len(LETTERS)) + tpl

    def head_features(self, head: int) -> Tuple[int, ...]:
        """Feature indices visible to a head. Restricting each head to its
        relevant block keeps the factored heads from entangling unrelated
        evidence (e.g. the risk head never sees frame positions)."""
        s = len(self.symbols)
        c = len(self.categories)
        sym = tuple(range(s))
        dom = tuple(range(s, s + c))
        span = tuple(range(s + c, s + c + 2 * N_BUCKETS))
        kind = tuple(range(s + c + 2 * N_BUCKETS, s + c + 2 * N_BUCKETS + len(_KIND_ORDER)))
        choice = tuple(range(s + c + 2 * N_BUCKETS + len(_KIND_ORDER),
                             s + c + 2 * N_BUCKETS + len(_KIND_ORDER) + len(LETTERS)))
        bias = (self.feature_dim - 1,)
        # Heads whose input block is itself a one-hot get no bias: the
        # intercept would be redundant and lets a majority class leak
        # across categories during policy-gradient updates.
        if head == _H_DEPTH:
            return kind
        if head == _H_CATEGORY:
            return sym + dom
        if head in (_H_START, _H_END):
            return span + bias
        if head == _H_RISK:
            return dom
        if head == _H_LETTER:
            return choice + bias
        return bias  # per-stage template heads

    @property
    def n_parameters(self) -> int:
        return sum(
            size * len(self.head_features(head))
            for head, size in enumerate(self.head_sizes)
        )

    def category_index(self, category: str) -> int:
        canon = normalize_category(category)
        for i, c in enumerate(self.categories):
            if normalize_category(c) == canon:
                return i
        raise KeyError(f"unknown category: {category!r}")

    def category_of_symbol(self, symbol: str) -> str:
        for leaf in self.categories[1:]:
            if symbol_for_category(leaf) == symbol:
                return leaf
        return NORMAL_CATEGORY


@dataclass(frozen=True)
class PolicyContext:
    x: np.ndarray
    kind: QuestionKind

    @property
    def is_mcq(self) -> bool:
        return self.kind.is_mcq

    @property
    def dimension(self) -> StageKind:
        return self.kind.dimension


def dominant_category(spec: ToyPolicySpec, features: FeatureVector) -> str:
    """Category whose anomaly symbol dominates the sampled counts."""
    best, best_count = NORMAL_CATEGORY, 0
    for symbol in spec.symbols[len(NORMAL_SYMBOLS):]:
        count = features.counts.get(symbol, 0)
        if count > best_count:
            best, best_count = spec.category_of_symbol(symbol), count
    return best


def build_context(spec: ToyPolicySpec, features: FeatureVector,
                  q: QuestionRecord) -> PolicyContext:
    x = np.zeros(spec.feature_dim)
    n = max(features.n_sampled, 1)
    for i, symbol in enumerate(spec.symbols):
        x[i] = features.counts.get(symbol, 0) / n
    base = len(spec.symbols)
    dom = normalize_category(dominant_category(spec, features))
    x[base + spec.category_index(dom)] = 1.0
    base += len(spec.categories)
    if features.anomaly_span is not None:
        first, last = features.anomaly_span
        x[base + min(N_BUCKETS - 1, int(first * N_BUCKETS))] = 1.0
        x[base + N_BUCKETS + min(N_BUCKETS - 1, int(last * N_BUCKETS))] = 1.0
    base += 2 * N_BUCKETS
    x[base + _KIND_ORDER.index(q.kind)] = 1.0
    base += len(_KIND_ORDER)
    if q.choices is not None:
        for j, (_, text) in enumerate(q.choices):
            if normalize_category(text) == dom:
                x[base + j] = 1.0
    x[-1] = 1.0
    return PolicyContext(x=x, kind=q.kind)


class ToyPolicy(DifferentiablePolicy):
    """Factored linear-softmax policy; every emission parses successfully."""

    def __init__(self, spec: ToyPolicySpec, theta: Optional[np.ndarray] = None):
        self.spec = spec
        if theta is None:
            theta = np.zeros(spec.n_parameters)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (spec.n_parameters,):
            raise ValueError(
                f"expected {spec.n_parameters} parameters, got {theta.shape}"
            )
        self._theta = theta.copy()
        self._theta.setflags(write=False)
        self._features = tuple(
            np.asarray(spec.head_features(head), dtype=int)
            for head in range(len(spec.head_sizes))
        )
        offsets = []
        pos = 0
        for head, size in enumerate(spec.head_sizes):
            offsets.append(pos)
            pos += size * len(self._features[head])
        self._offsets = tuple(offsets)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> np.ndarray:
        return self._theta.copy()

    def with_parameters(self, theta: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(self.spec, theta)

    def head_weights(self, head: int) -> np.ndarray:
        size = self.spec.head_sizes[head]
        d = len(self._features[head])
        start = self._offsets[head]
        return self._theta[start:start + size * d].reshape(size, d)

    def _head_log_probs(self, head: int, x: np.ndarray,
                        mask: Optional[np.ndarray]) -> np.ndarray:
        z = self.head_weights(head) @ x[self._features[head]]
        if mask is not None:
            z = np.where(mask, z, -np.inf)
        z = z - z.max()
        log_norm = np.log(np.exp(z).sum())
        return z - log_norm

    # -- schema walk ----------------------------------------------------------
    #
    # Token order: depth, per-stage template ids, category (when the stage
    # set or the open answer needs one), interval buckets (abnormal
    # cognition), risk (action stage or action-open answer), MCQ letter.

    def _walk(self, context: PolicyContext, choose) -> List[Tuple[int, Optional[np.ndarray], int]]:
        events: List[Tuple[int, Optional[np.ndarray], int]] = []

        def step(head: int, mask: Optional[np.ndarray] = None) -> int:
            k = choose(head, mask)
            events.append((head, mask, k))
            return k

        depth = step(_H_DEPTH) + 1
        for kind in (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION):
            if kind.depth <= depth:
                step(_TPL_HEAD[kind])
        is_open = not context.is_mcq
        need_category = depth >= 2 or (is_open and context.dimension != StageKind.ACTION)
        cat_idx = None
        if need_category:
            cat_idx = step(_H_CATEGORY)
            if depth >= 2 and cat_idx != 0:
                b_start = step(_H_START)
                mask = np.arange(N_BUCKETS) >= b_start
                step(_H_END, mask)
        if depth >= 3 or (is_open and context.dimension == StageKind.ACTION):
            step(_H_RISK)
        if context.is_mcq:
            step(_H_LETTER)
        return events

    def act(self, context: PolicyContext, rng,
            greedy: bool = False) -> Tuple[List[int], np.ndarray]:
        log_probs: List[float] = []

        def choose(head: int, mask) -> int:
            lp = self._head_log_probs(head, context.x, mask)
            if greedy:
                k = int(np.argmax(lp))
            else:
                probs = np.exp(lp)
                probs = probs / probs.sum()
                u = rng.random()
                k = int(np.searchsorted(np.cumsum(probs), u, side="right"))
                k = min(k, len(probs) - 1)
                if mask is not None and not mask[k]:  # numeric edge at u ~ 1
                    k = int(np.flatnonzero(mask)[-1])
            log_probs.append(float(lp[k]))
            return k

        events = self._walk(context, choose)
        return [k for _, _, k in events], np.array(log_probs)

    def sample(self, context: PolicyContext, rng) -> Tuple[List[int], np.ndarray]:
        return self.act(context, rng, greedy=False)

    def _replay(self, context: PolicyContext, tokens: Sequence[int]):
        tokens = list(tokens)
        cursor = {"i": 0}

        def choose(head: int, mask) -> int:
            i = cursor["i"]
            if i >= len(tokens):
                raise ValueError("token sequence too short for the schema")
            k = int(tokens[i])
            size = self.spec.head_sizes[head]
            if not 0 <= k < size or (mask is not None and not mask[k]):
                raise ValueError(f"token {k} invalid for head {head}")
            cursor["i"] = i + 1
            return k

        events = self._walk(context, choose)
        if cursor["i"] != len(tokens):
            raise ValueError("token sequence too long for the schema")
        return events

    def log_prob(self, context: PolicyContext, tokens: Sequence[int]) -> np.ndarray:
        events = self._replay(context, tokens)
        return np.array([
            float(self._head_log_probs(head, context.x, mask)[k])
            for head, mask, k in events
        ])

    def step_distributions(self, context: PolicyContext, tokens: Sequence[int]):
        events = self._replay(context, tokens)
        out = []
        for head, mask, _ in events:
            lp = self._head_log_probs(head, context.x, mask)
            probs = np.exp(lp)
            out.append(probs / probs.sum())
        return out

    def grad_log_prob(self, context: PolicyContext,
                      tokens: Sequence[int]) -> np.ndarray:
        events = self._replay(context, tokens)
        out = np.zeros((len(events), self.spec.n_parameters))
        for t, (head, mask, k) in enumerate(events):
            lp = self._head_log_probs(head, context.x, mask)
            probs = np.exp(lp)
            coeff = -probs
            coeff[k] += 1.0
            if mask is not None:
                coeff = np.where(mask, coeff, 0.0)
            start = self._offsets[head]
            size = self.spec.head_sizes[head]
            xs = context.x[self._features[head]]
            out[t, start:start + size * len(xs)] = np.outer(coeff, xs).ravel()
        return out

    def kl_and_grad(self, context: PolicyContext, tokens: Sequence[int],
                    ref: "ToyPolicy") -> Tuple[float, np.ndarray]:
        events = self._replay(context, tokens)
        grad = np.zeros(self.spec.n_parameters)
        total = 0.0
        for head, mask, _ in events:
            lp_new = self._head_log_probs(head, context.x, mask)
            lp_ref = ref._head_log_probs(head, context.x, mask)
            support = mask if mask is not None else np.ones(len(lp_new), dtype=bool)
            p = np.exp(lp_new[support])
            log_ratio = lp_new[support] - lp_ref[support]
            kl = float(np.sum(p * log_ratio))
            total += kl
            coeff = np.zeros(len(lp_new))
            coeff[support] = p * (log_ratio - kl)
            start = self._offsets[head]
            size = self.spec.head_sizes[head]
            xs = context.x[self._features[head]]
            grad[start:start + size * len(xs)] += np.outer(coeff, xs).ravel()
        n = len(events)
        return total / n, grad / n

    # -- decoding -------------------------------------------------------------

    def decode(self, context: PolicyContext,
               tokens: Sequence[int]) -> StructuredResponse:
        """Typed response for a token sequence (always grammar-valid)."""
        events = self._replay(context, tokens)
        values = {"tpl": {}}
        for head, _, k in events:
            if head == _H_DEPTH:
                values["depth"] = k + 1
            elif head == _H_CATEGORY:
                values["category"] = self.spec.categories[k]
            elif head == _H_START:
                values["b_start"] = k
            elif head == _H_END:
                values["b_end"] = k
            elif head == _H_RISK:
                values["risk"] = RiskLevel(k)
            elif head == _H_LETTER:
                values["letter"] = LETTERS[k]
            else:
                for kind, h in _TPL_HEAD.items():
                    if head == h:
                        values["tpl"][kind] = k
        depth = values["depth"]
        stages = tuple(
            (kind, STAGE_TEXTS[kind][values["tpl"][kind]])
            for kind in (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION)
            if kind.depth <= depth
        )
        judgment = None
        if depth >= 2:
            category = values["category"]
            interval = None
            if "b_start" in values:
                interval = TemporalInterval(
                    values["b_start"] / N_BUCKETS, (values["b_end"] + 1) / N_BUCKETS
                )
            judgment = AnomalyJudgment(category, interval)
        risk = values.get("risk") if depth >= 3 else None
        if context.is_mcq:
            answer = values["letter"]
        else:
            answer = canonical_open_answer(
                context.dimension,
                values.get("category", NORMAL_CATEGORY),
                values.get("risk", RiskLevel.LOW),
            )
        return StructuredResponse(
            stages=stages, judgment=judgment, risk=risk, answer=answer
        )


def sample_structured(
    policy: ToyPolicy,
    features: FeatureVector,
    q: QuestionRecord,
    rng,
    greedy: bool = False,
) -> Tuple[str, List[int], np.ndarray]:
    """Emit grammar-valid text plus the tokens and their log-probs."""
    context = build_context(policy.spec, features, q)
    tokens, log_probs = policy.act(context, rng, greedy=greedy)
    raw = render_response(policy.decode(context, tokens))
    return raw, tokens, log_probs


def encode_gold_tokens(spec: ToyPolicySpec, q: QuestionRecord) -> Tuple[int, ...]:
    """Target token sequence realizing the record's gold fields."""
    depth = expected_depth(q.kind)
    tokens: List[int] = [depth - 1]
    tokens.extend(0 for _ in range(depth))  # canonical stage templates
    is_open = not q.kind.is_mcq
    need_category = depth >= 2 or (is_open and q.kind.dimension != StageKind.ACTION)
    if need_category:
        cat_idx = spec.category_index(q.gold_category)
        tokens.append(cat_idx)
        if depth >= 2 and cat_idx != 0:
            iv = q.gold_interval
            b_start = min(N_BUCKETS - 1, max(0, round(iv.start * N_BUCKETS)))
            b_end = min(N_BUCKETS - 1, max(b_start, round(iv.end * N_BUCKETS) - 1))
            tokens.extend((b_start, b_end))
    if depth >= 3 or (is_open and q.kind.dimension == StageKind.ACTION):
        tokens.append(int(q.gold_risk))
    if q.kind.is_mcq:
        tokens.append(LETTERS.index(q.gold_letter))
    return tuple(tokens)


def sft_batches(
    records: Sequence[QuestionRecord],
    videos: Mapping[str, SyntheticVideo],
    spec: ToyPolicySpec,
    budget: int = 16,
) -> List[SftBatch]:
    """Teacher-forcing batches for the sft split of a corpus."""
    batches = []
    for q in records:
        if q.split != "sft":
            continue
        features = observe(videos[q.video_id], budget)
        context = build_context(spec, features, q)
        batches.append(SftBatch(context=context, targets=encode_gold_tokens(spec, q)))
    return batches
