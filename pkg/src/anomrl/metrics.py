"""Answer- and reasoning-level metrics computable without external models,
plus report assembly. Semantic and judgment scorers are pluggable (see
``oracle``); only exact-frequency fields are computed locally.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .data import QuestionRecord, canonical_open_answer
from .grammar import (
    ParseError,
    ParseOutcome,
    StageKind,
    StructuredResponse,
    expected_depth,
    normalize_category,
    reasoning_depth,
)
from .rewards import extract_option_letter, tokenize

__all__ = [
    "EvalRecord",
    "JointReport",
    "StageReport",
    "mcq_accuracy",
    "bleu",
    "rouge",
    "meteor_basic",
    "joint_outcomes",
    "depth_alignment",
    "stage_report",
]


@dataclass(frozen=True)
class EvalRecord:
    question: QuestionRecord
    outcome: ParseOutcome

    @property
    def response(self) -> Optional[StructuredResponse]:
        return self.outcome if isinstance(self.outcome, StructuredResponse) else None


def mcq_accuracy(records: Sequence[EvalRecord]) -> float:
    if not records:
        return 0.0
    correct = 0
    for rec in records:
        if not rec.question.kind.is_mcq:
            raise ValueError(f"record {rec.question.id} is not MCQ")
        resp = rec.response
        if resp is not None and extract_option_letter(resp.answer) == rec.question.gold_letter:
            correct += 1
    return correct / len(records)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Geometric mean of modified n-gram precisions with +1 smoothing on
    orders > 1 (bypassed when the raw precision is already exact), times the
    brevity penalty exp(min(0, 1 - |ref|/|cand|)).
    """
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_grams = _ngrams(cand, n)
        ref_grams = _ngrams(ref, n)
        total = sum(cand_grams.values())
        matched = sum((cand_grams & ref_grams).values())
        if n == 1:
            if matched == 0:
                return 0.0
            p = matched / total
        elif matched == total and total > 0:
            p = 1.0
        else:
            p = (matched + 1) / (total + 1)
        log_sum += math.log(p)
    bp = math.exp(min(0.0, 1.0 - len(ref) / len(cand)))
    return bp * math.exp(log_sum / max_n)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            curr.append(prev[j - 1] + 1 if x == y else max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge(candidate: str, reference: str, variant: str = "N2") -> Tuple[float, float, float]:
    """ROUGE-2 bigram overlap or ROUGE-L via longest common subsequence."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if variant == "N2":
        cand_grams = _ngrams(cand, 2)
        ref_grams = _ngrams(ref, 2)
        overlap = sum((cand_grams & ref_grams).values())
        p_den = sum(cand_grams.values())
        r_den = sum(ref_grams.values())
    elif variant == "L":
        overlap = _lcs_length(cand, ref)
        p_den = len(cand)
        r_den = len(ref)
    else:
        raise ValueError(f"unknown rouge variant: {variant!r}")
    precision = overlap / p_den if p_den else 0.0
    recall = overlap / r_den if r_den else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _greedy_alignment(cand: Sequence[str], ref: Sequence[str]) -> Tuple[int, int]:
    """Exact-match unigram alignment, left-to-right, preferring contiguous
    reference positions to minimize chunks. Returns (matches, chunks).
    """
    used = [False] * len(ref)
    matches = 0
    chunks = 0
    prev_ref = -2
    for token in cand:
        choice = -1
        for j, rt in enumerate(ref):
            if used[j] or rt != token:
                continue
            if j == prev_ref + 1:
                choice = j
                break
            if choice < 0:
                choice = j
        if choice < 0:
            prev_ref = -2
            continue
        used[choice] = True
        matches += 1
        if choice != prev_ref + 1:
            chunks += 1
        prev_ref = choice
    return matches, chunks


def meteor_basic(candidate: str, reference: str) -> float:
    """Simplified exact-match variant: F = 10PR/(R+9P), chunk penalty
    0.5*(chunks/matches)^3. Stemming/synonym matching is omitted.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    matches, chunks = _greedy_alignment(cand, ref)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


@dataclass(frozen=True)
class JointReport:
    rr: float
    rw: float
    wr: float
    ww: float
    rrr: Optional[float]
    www: Optional[float]
    counts: Dict[str, int]

    def as_dict(self) -> dict:
        return {
            "RR": self.rr, "RW": self.rw, "WR": self.wr, "WW": self.ww,
            "RRR": self.rrr, "WWW": self.www, "counts": dict(self.counts),
        }


def joint_outcomes(
    flags: Sequence[Tuple[bool, bool, Optional[bool]]],
    require_triple: bool = False,
) -> JointReport:
    """Quadrant fractions over (reasoning_ok, answer_ok) plus the stricter
    all-three / none-of-three fractions when category_ok is available.
    """
    if not flags:
        raise ValueError("joint_outcomes needs at least one record")
    counts = {"RR": 0, "RW": 0, "WR": 0, "WW": 0, "RRR": 0, "WWW": 0}
    have_category = True
    for reasoning_ok, answer_ok, category_ok in flags:
        key = ("R" if reasoning_ok else "W") + ("R" if answer_ok else "W")
        counts[key] += 1
        if category_ok is None:
            have_category = False
            if require_triple:
                raise ValueError("category_ok missing but Triple Right requested")
            continue
        if reasoning_ok and answer_ok and category_ok:
            counts["RRR"] += 1
        if not (reasoning_ok or answer_ok or category_ok):
            counts["WWW"] += 1
    n = len(flags)
    return JointReport(
        rr=counts["RR"] / n,
        rw=counts["RW"] / n,
        wr=counts["WR"] / n,
        ww=counts["WW"] / n,
        rrr=counts["RRR"] / n if have_category else None,
        www=counts["WWW"] / n if have_category else None,
        counts=counts,
    )


def depth_alignment(records: Sequence[EvalRecord]) -> float:
    """Fraction whose generated depth equals the expected depth; parse
    errors count as misaligned."""
    if not records:
        return 0.0
    aligned = sum(
        1 for rec in records
        if reasoning_depth(rec.outcome) == expected_depth(rec.question.kind)
    )
    return aligned / len(records)


def category_correct(rec: EvalRecord) -> bool:
    resp = rec.response
    if resp is None or resp.judgment is None:
        return False
    return normalize_category(resp.judgment.category) == normalize_category(
        rec.question.gold_category
    )


def risk_correct(rec: EvalRecord) -> bool:
    resp = rec.response
    return resp is not None and resp.risk is not None and resp.risk == rec.question.gold_risk


@dataclass(frozen=True)
class StageReport:
    identification: Optional[float]
    interpretation: Optional[float]
    category_accuracy: Optional[float]
    appropriateness: Optional[float]
    risk_accuracy: Optional[float]

    def as_dict(self) -> dict:
        return {
            "identification": self.identification,
            "interpretation": self.interpretation,
            "category_accuracy": self.category_accuracy,
            "appropriateness": self.appropriateness,
            "risk_accuracy": self.risk_accuracy,
        }


def _judge_mean(judge, records: Sequence[EvalRecord], rubric: str) -> Optional[float]:
    if judge is None or not records:
        return None
    scores = []
    for rec in records:
        raw = rec.response.raw if rec.response is not None else ""
        scores.append(float(judge.assess(raw, rec.question, rubric)))
    return sum(scores) / len(scores)


def stage_report(records: Sequence[EvalRecord], judge=None) -> StageReport:
    """Stage-partitioned report: exact category/risk frequencies plus the
    three judged scores when a judge is available."""
    by_dim = {dim: [] for dim in StageKind}
    for rec in records:
        by_dim[rec.question.kind.dimension].append(rec)
    cognition = by_dim[StageKind.COGNITION]
    action = by_dim[StageKind.ACTION]
    category_acc = (
        sum(category_correct(r) for r in cognition) / len(cognition) if cognition else None
    )
    risk_acc = sum(risk_correct(r) for r in action) / len(action) if action else None
    return StageReport(
        identification=_judge_mean(judge, by_dim[StageKind.PERCEPTION], "identification"),
        interpretation=_judge_mean(judge, cognition, "interpretation"),
        category_accuracy=category_acc,
        appropriateness=_judge_mean(judge, action, "appropriateness"),
        risk_accuracy=risk_acc,
    )
