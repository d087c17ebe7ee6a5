"""Canonical JSON forms for parse outcomes, reward breakdowns, synthetic
videos, and toy-policy snapshots. Every document is emitted with sorted keys
and compact separators so identical inputs serialize byte-identically.
"""

from __future__ import annotations

import json
from typing import Dict, List, Mapping, Optional

import numpy as np

from .grammar import (
    AnomalyJudgment,
    ParseError,
    ParseErrorClass,
    ParseOutcome,
    RiskLevel,
    StageKind,
    StructuredResponse,
    TemporalInterval,
)
from .rewards import RewardBreakdown
from .simenv import SyntheticVideo, ToyPolicy, ToyPolicySpec

__all__ = [
    "dumps",
    "outcome_to_dict",
    "outcome_from_dict",
    "breakdown_to_dict",
    "videos_to_dict",
    "videos_from_dict",
    "policy_to_dict",
    "policy_from_dict",
]


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def outcome_to_dict(outcome: ParseOutcome) -> dict:
    if isinstance(outcome, ParseError):
        return {
            "ok": False,
            "error_class": outcome.error_class.value,
            "offset": outcome.offset,
            "message": outcome.message,
        }
    return {
        "ok": True,
        "stages": [[kind.tag, text] for kind, text in outcome.stages],
        "judgment": (
            None
            if outcome.judgment is None
            else {
                "category": outcome.judgment.category,
                "interval": (
                    None
                    if outcome.judgment.interval is None
                    else [outcome.judgment.interval.start, outcome.judgment.interval.end]
                ),
            }
        ),
        "risk": outcome.risk.label if outcome.risk is not None else None,
        "answer": outcome.answer,
    }


_STAGE_BY_TAG = {kind.tag: kind for kind in StageKind}


def outcome_from_dict(doc: dict) -> ParseOutcome:
    if not doc.get("ok"):
        return ParseError(
            error_class=ParseErrorClass(doc["error_class"]),
            offset=int(doc["offset"]),
            message=doc.get("message", ""),
        )
    judgment = None
    if doc.get("judgment") is not None:
        jd = doc["judgment"]
        interval = None
        if jd.get("interval") is not None:
            interval = TemporalInterval(*jd["interval"])
        judgment = AnomalyJudgment(jd["category"], interval)
    risk = RiskLevel.from_label(doc["risk"]) if doc.get("risk") is not None else None
    return StructuredResponse(
        stages=tuple((_STAGE_BY_TAG[tag], text) for tag, text in doc["stages"]),
        judgment=judgment,
        risk=risk,
        answer=doc["answer"],
    )


def breakdown_to_dict(breakdown: RewardBreakdown,
                      advantage: Optional[float] = None) -> dict:
    doc = breakdown.as_dict()
    if advantage is not None:
        doc["advantage"] = advantage
    return doc


def videos_to_dict(videos: Mapping[str, SyntheticVideo]) -> dict:
    out: Dict[str, dict] = {}
    for vid, video in videos.items():
        out[vid] = {
            "frames": list(video.frames),
            "anomaly": (
                None
                if video.anomaly is None
                else [video.anomaly[0], [video.anomaly[1].start, video.anomaly[1].end]]
            ),
            "risk": video.risk.label if video.risk is not None else None,
        }
    return out


def videos_from_dict(doc: Mapping[str, dict]) -> Dict[str, SyntheticVideo]:
    out: Dict[str, SyntheticVideo] = {}
    for vid, body in doc.items():
        anomaly = None
        if body.get("anomaly") is not None:
            category, (start, end) = body["anomaly"]
            anomaly = (category, TemporalInterval(start, end))
        risk = RiskLevel.from_label(body["risk"]) if body.get("risk") else None
        out[vid] = SyntheticVideo(
            id=vid, frames=tuple(body["frames"]), anomaly=anomaly, risk=risk
        )
    return out


def policy_to_dict(policy: ToyPolicy) -> dict:
    return {
        "categories": list(policy.spec.categories),
        "symbols": list(policy.spec.symbols),
        "theta": [float(v) for v in policy.parameters()],
    }


def policy_from_dict(doc: dict) -> ToyPolicy:
    spec = ToyPolicySpec(
        categories=tuple(doc["categories"]), symbols=tuple(doc["symbols"])
    )
    return ToyPolicy(spec, np.asarray(doc["theta"], dtype=float))
