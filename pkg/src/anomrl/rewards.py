"""Reward suite: format, accuracy, reasoning depth, risk, and anomaly
verification, plus the timeline-excision primitives and the weighted total.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

from .data import QuestionRecord
from .grammar import (
    NORMAL_CATEGORY,
    ParseError,
    ParseOutcome,
    RiskLevel,
    StructuredResponse,
    TemporalInterval,
    normalize_category,
    parse_response,
    reasoning_depth,
    expected_depth,
)

__all__ = [
    "VideoTimeline",
    "Side",
    "RewardConfig",
    "RewardBreakdown",
    "EmptyTimelineError",
    "format_reward",
    "accuracy_reward",
    "depth_reward",
    "risk_reward",
    "excise_interval",
    "excise_boundary",
    "verification_reward",
    "total_reward",
    "score_response",
    "extract_option_letter",
    "tokenize",
    "token_f1",
]

COMPONENTS = ("format", "accuracy", "depth", "risk", "verification")


class EmptyTimelineError(ValueError):
    """Excision would remove every frame."""


@dataclass(frozen=True)
class VideoTimeline:
    """Ordered opaque frame references with normalized timestamps."""

    frames: Tuple[Tuple[str, float], ...]

    def __post_init__(self) -> None:
        if len(self.frames) < 1:
            raise ValueError("timeline needs at least one frame")
        last = -math.inf
        for _, ts in self.frames:
            if not (0.0 <= ts <= 1.0):
                raise ValueError(f"timestamp {ts} outside [0, 1]")
            if ts <= last:
                raise ValueError("timestamps must be strictly increasing")
            last = ts

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> Tuple[float, ...]:
        return tuple(ts for _, ts in self.frames)

    @property
    def tokens(self) -> Tuple[str, ...]:
        return tuple(ref for ref, _ in self.frames)


class Side(Enum):
    HEAD = "head"
    TAIL = "tail"


@dataclass(frozen=True)
class RewardConfig:
    weights: Dict[str, float] = field(
        default_factory=lambda: {c: 1.0 for c in COMPONENTS}
    )
    depth_penalty_per_step: float = 0.5
    risk_schedule: Dict[int, float] = field(
        default_factory=lambda: {0: 1.0, 1: 0.3, 2: -0.5}
    )
    missing_risk_penalty: float = -0.5
    boundary_trim_fraction: float = 0.25
    open_answer_threshold: float = 0.0
    verification_sample_prob: float = 1.0

    def __post_init__(self) -> None:
        for name, w in self.weights.items():
            if name not in COMPONENTS:
                raise ValueError(f"unknown reward component: {name}")
            if w < 0:
                raise ValueError(f"weight for {name} must be >= 0")
        if set(self.weights) != set(COMPONENTS):
            raise ValueError(f"weights must cover exactly {COMPONENTS}")
        if not (self.risk_schedule[0] > self.risk_schedule[1] > self.risk_schedule[2]):
            raise ValueError("risk_schedule must be strictly decreasing in distance")
        if not (0.0 < self.boundary_trim_fraction < 0.5):
            raise ValueError("boundary_trim_fraction must lie in (0, 0.5)")
        if not (0.0 <= self.verification_sample_prob <= 1.0):
            raise ValueError("verification_sample_prob must lie in [0, 1]")


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    accuracy: float
    depth: float
    risk: float
    verification: float
    total: float = 0.0

    def with_total(self, cfg: RewardConfig) -> "RewardBreakdown":
        return replace(self, total=total_reward(self, cfg))

    def as_dict(self) -> Dict[str, float]:
        return {
            "format": self.format,
            "accuracy": self.accuracy,
            "depth": self.depth,
            "risk": self.risk,
            "verification": self.verification,
            "total": self.total,
        }


_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_OPTION_RE = re.compile(r"\b([A-D])\b")


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace/punctuation, punctuation dropped."""
    return _TOKEN_RE.findall(text.lower())


def extract_option_letter(text: str) -> Optional[str]:
    """First standalone A-D in an answer field."""
    m = _OPTION_RE.search(text)
    return m.group(1) if m else None


def token_f1(candidate: str, reference: str) -> float:
    cand = Counter(tokenize(candidate))
    ref = Counter(tokenize(reference))
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def format_reward(outcome: ParseOutcome) -> float:
    return 1.0 if isinstance(outcome, StructuredResponse) else 0.0


def accuracy_reward(outcome: ParseOutcome, q: QuestionRecord, cfg: RewardConfig) -> float:
    if isinstance(outcome, ParseError):
        return 0.0
    if q.kind.is_mcq:
        if q.gold_letter is None:
            raise ValueError(f"record {q.id} is MCQ but has no gold_letter")
        return 1.0 if extract_option_letter(outcome.answer) == q.gold_letter else 0.0
    if q.reference_answer is None:
        raise ValueError(f"record {q.id} is open-ended but has no reference_answer")
    score = token_f1(outcome.answer, q.reference_answer)
    if cfg.open_answer_threshold > 0.0:
        return 1.0 if score >= cfg.open_answer_threshold else 0.0
    return score


def depth_reward(pred_depth: int, expected: int, valid: bool,
                 cfg: Optional[RewardConfig] = None) -> float:
    if not valid:
        return 0.0
    per_step = cfg.depth_penalty_per_step if cfg is not None else 0.5
    return max(0.0, 1.0 - per_step * abs(pred_depth - expected))


def risk_reward(pred: Optional[RiskLevel], gold: Optional[RiskLevel],
                cfg: RewardConfig) -> float:
    if gold is None:
        return 0.0
    if pred is None:
        return cfg.missing_risk_penalty
    return cfg.risk_schedule[abs(int(pred) - int(gold))]


def _renormalize(frames: Sequence[Tuple[str, float]]) -> VideoTimeline:
    if len(frames) == 1:
        return VideoTimeline(((frames[0][0], 0.5),))
    lo = frames[0][1]
    hi = frames[-1][1]
    span = hi - lo
    rescaled = []
    for i, (ref, ts) in enumerate(frames):
        if i == 0:
            t = 0.0
        elif i == len(frames) - 1:
            t = 1.0
        else:
            t = (ts - lo) / span
        rescaled.append((ref, t))
    return VideoTimeline(tuple(rescaled))


def excise_interval(t: VideoTimeline, iv: TemporalInterval) -> VideoTimeline:
    """Drop frames with timestamp in the closed interval, then renormalize.

    A no-op (interval already empty of frames) returns the timeline unchanged,
    making excision idempotent.
    """
    kept = [f for f in t.frames if not (iv.start <= f[1] <= iv.end)]
    if len(kept) == len(t.frames):
        return t
    if not kept:
        raise EmptyTimelineError("interval excision would remove every frame")
    return _renormalize(kept)


def excise_boundary(t: VideoTimeline, side: Side, fraction: float) -> VideoTimeline:
    if not (0.0 < fraction < 0.5):
        raise ValueError("fraction must lie in (0, 0.5)")
    if side == Side.HEAD:
        kept = [f for f in t.frames if f[1] >= fraction]
    else:
        kept = [f for f in t.frames if f[1] <= 1.0 - fraction]
    if len(kept) == len(t.frames):
        return t
    if not kept:
        raise EmptyTimelineError("boundary excision would remove every frame")
    return _renormalize(kept)


def _reply_verdict(raw: str, taxonomy: Sequence[str]) -> Optional[bool]:
    """True if the reply judges abnormal, False if normal, None if unusable."""
    outcome = parse_response(raw, taxonomy)
    if isinstance(outcome, ParseError) or outcome.judgment is None:
        return None
    return outcome.judgment.is_abnormal


def verification_reward(
    resp: StructuredResponse,
    video: VideoTimeline,
    oracle,
    rng,
    cfg: RewardConfig,
    taxonomy: Sequence[str],
    question: str,
) -> float:
    """Temporal-evidence check: re-query the oracle on a trimmed timeline.

    Abnormal prediction: excise the predicted interval; a flip to normal
    earns +1. Normal prediction: excise a random head/tail fraction; a flip
    to abnormal earns -1. Everything else (including unparseable replies)
    is 0. Oracle transport failures propagate (OracleUnavailable).
    """
    predicted_abnormal = resp.judgment is not None and resp.judgment.is_abnormal
    if predicted_abnormal:
        if resp.judgment.interval is None:
            raise ValueError("abnormal judgment without an interval")
        try:
            trimmed = excise_interval(video, resp.judgment.interval)
        except EmptyTimelineError:
            return 0.0  # nothing left to re-query; treated as unverifiable
        reply = oracle.query(trimmed, question, greedy=True)
        verdict = _reply_verdict(reply, taxonomy)
        return 1.0 if verdict is False else 0.0
    side = Side.HEAD if rng.random() < 0.5 else Side.TAIL
    try:
        trimmed = excise_boundary(video, side, cfg.boundary_trim_fraction)
    except EmptyTimelineError:
        return 0.0
    reply = oracle.query(trimmed, question, greedy=True)
    verdict = _reply_verdict(reply, taxonomy)
    return -1.0 if verdict is True else 0.0


def total_reward(components: RewardBreakdown, cfg: RewardConfig) -> float:
    return sum(
        cfg.weights[name] * getattr(components, name) for name in COMPONENTS
    )


def score_response(
    raw: str,
    q: QuestionRecord,
    taxonomy: Sequence[str],
    cfg: RewardConfig,
    video: Optional[VideoTimeline] = None,
    oracle=None,
    rng=None,
) -> RewardBreakdown:
    """Compute every reward component for one raw completion.

    Verification runs only when a timeline and an oracle are supplied (and
    the per-completion sampling probability admits it); otherwise it is 0.
    """
    outcome = parse_response(raw, taxonomy)
    valid = isinstance(outcome, StructuredResponse)
    fmt = format_reward(outcome)
    acc = accuracy_reward(outcome, q, cfg)
    dep = depth_reward(reasoning_depth(outcome), expected_depth(q.kind), valid, cfg)
    # Invalid outputs earn nothing, not the missing-risk penalty.
    rsk = risk_reward(outcome.risk, q.gold_risk, cfg) if valid else 0.0
    ver = 0.0
    if valid and video is not None and oracle is not None and rng is not None:
        if cfg.verification_sample_prob >= 1.0 or rng.random() < cfg.verification_sample_prob:
            ver = verification_reward(outcome, video, oracle, rng, cfg, taxonomy, q.question)
    breakdown = RewardBreakdown(
        format=fmt, accuracy=acc, depth=dep, risk=rsk, verification=ver
    )
    return breakdown.with_total(cfg)
