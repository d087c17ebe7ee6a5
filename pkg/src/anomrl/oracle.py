"""Clients for the external oracles: the policy oracle used by the
verification re-query (and real-model evaluation) and the judge used by
judged metrics. In-process and replay implementations make the protocols
fully deterministic for tests; the HTTP client speaks a small JSON wire
format (POST /v1/query and /v1/judge).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence

import requests

from .data import QuestionRecord
from .grammar import (
    ParseError,
    StructuredResponse,
    expected_depth,
    normalize_category,
    parse_response,
    reasoning_depth,
)
from .rewards import VideoTimeline

__all__ = [
    "OracleUnavailable",
    "OracleMalformed",
    "EndpointConfig",
    "timeline_fingerprint",
    "ReplayOracle",
    "CallableOracle",
    "InProcessOracle",
    "HttpPolicyOracle",
    "RuleJudge",
    "HttpJudge",
    "RUBRICS",
]

logger = logging.getLogger(__name__)

RUBRICS = (
    "reasonability",
    "detail",
    "consistency",
    "identification",
    "interpretation",
    "appropriateness",
    "reasoning_correct",
)

_BACKOFF_INITIAL = 0.2
_BACKOFF_CAP = 5.0


class OracleUnavailable(RuntimeError):
    """Transport failure after exhausting retries."""


class OracleMalformed(RuntimeError):
    """Reply violates the wire schema."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    timeout_ms: int = 10_000
    max_retries: int = 2
    max_concurrency: int = 4
    auth_env: Optional[str] = None

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


def timeline_fingerprint(timeline: VideoTimeline) -> str:
    doc = {
        "frames": list(timeline.tokens),
        "timestamps": [round(ts, 6) for ts in timeline.timestamps],
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ReplayOracle:
    """Scripted oracle keyed by (timeline fingerprint, question)."""

    def __init__(self, script: Mapping, default: Optional[str] = None):
        self._script = dict(script)
        self._default = default

    def query(self, timeline: VideoTimeline, question: str, greedy: bool = True) -> str:
        key = (timeline_fingerprint(timeline), question)
        if key in self._script:
            return self._script[key]
        if question in self._script:
            return self._script[question]
        if self._default is not None:
            return self._default
        raise OracleUnavailable(f"no scripted reply for question {question!r}")


class CallableOracle:
    """Wraps a plain function for tests."""

    def __init__(self, fn: Callable[[VideoTimeline, str, bool], str]):
        self._fn = fn

    def query(self, timeline: VideoTimeline, question: str, greedy: bool = True) -> str:
        return self._fn(timeline, question, greedy)


class InProcessOracle:
    """Wraps a toy policy plus frame observation; questions are looked up
    by their text so the wire contract stays string-typed."""

    def __init__(self, policy, records: Sequence[QuestionRecord], budget: int = 16):
        self._policy = policy
        self._budget = budget
        self._by_question: Dict[str, QuestionRecord] = {}
        for record in records:
            self._by_question.setdefault(record.question, record)

    def set_policy(self, policy) -> None:
        self._policy = policy

    def query(self, timeline: VideoTimeline, question: str, greedy: bool = True) -> str:
        from .simenv import build_context, observe

        record = self._by_question.get(question)
        if record is None:
            raise OracleMalformed(f"unknown question text: {question!r}")
        features = observe(timeline, self._budget)
        context = build_context(self._policy.spec, features, record)
        rng = random.Random(0)
        tokens, _ = self._policy.act(context, rng, greedy=greedy)
        from .grammar import render_response

        return render_response(self._policy.decode(context, tokens))


class _HttpClient:
    def __init__(self, cfg: EndpointConfig):
        self._cfg = cfg
        self._session = requests.Session()
        self._semaphore = threading.Semaphore(cfg.max_concurrency)

    def post(self, path: str, body: dict) -> dict:
        headers = {}
        if self._cfg.auth_env:
            token = os.environ.get(self._cfg.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        url = self._cfg.base_url.rstrip("/") + path
        delay = _BACKOFF_INITIAL
        last_error: Optional[Exception] = None
        for attempt in range(self._cfg.max_retries + 1):
            if attempt > 0:
                time.sleep(min(delay, _BACKOFF_CAP))
                delay *= 2
            try:
                with self._semaphore:
                    reply = self._session.post(
                        url, json=body, headers=headers,
                        timeout=self._cfg.timeout_ms / 1000.0,
                    )
                if reply.status_code >= 500:
                    last_error = OracleUnavailable(f"HTTP {reply.status_code} from {url}")
                    continue
                if reply.status_code != 200:
                    raise OracleMalformed(f"HTTP {reply.status_code} from {url}")
                try:
                    return reply.json()
                except ValueError as exc:
                    raise OracleMalformed(f"non-JSON reply from {url}: {exc}") from None
            except requests.RequestException as exc:
                last_error = exc
        raise OracleUnavailable(
            f"{url} unreachable after {self._cfg.max_retries + 1} attempts: {last_error}"
        )


class HttpPolicyOracle:
    """POST /v1/query with {"question", "frames", "timestamps", "greedy"};
    expects {"text": ...} back. Frame tokens stay opaque."""

    def __init__(self, cfg: EndpointConfig):
        self._client = _HttpClient(cfg)

    def query(self, timeline: VideoTimeline, question: str, greedy: bool = True) -> str:
        body = {
            "question": question,
            "frames": list(timeline.tokens),
            "timestamps": list(timeline.timestamps),
            "greedy": bool(greedy),
        }
        doc = self._client.post("/v1/query", body)
        if not isinstance(doc, dict) or not isinstance(doc.get("text"), str):
            raise OracleMalformed('reply must be an object with a string "text" field')
        return doc["text"]


def _clamp_score(value: float, source: str) -> float:
    if 0.0 <= value <= 1.0:
        return float(value)
    clamped = min(1.0, max(0.0, float(value)))
    logger.warning("judge score %s from %s clamped to %s", value, source, clamped)
    return clamped


class RuleJudge:
    """Deterministic rule-based judge for synthetic data.

    Rules (documented stand-ins for an external grader):
      - identification: response parses and has a perception stage;
      - interpretation: judged category equals the gold category;
      - appropriateness / consistency: predicted risk equals gold risk when
        gold risk exists, else format validity;
      - reasonability: format validity;
      - detail: generated depth / expected depth, capped at 1;
      - reasoning_correct: category correct AND depth aligned AND risk
        correct when applicable.
    """

    def __init__(self, taxonomy_lexicon: Sequence[str]):
        self._lexicon = tuple(taxonomy_lexicon)

    def assess(self, response: str, gold: QuestionRecord, rubric: str) -> float:
        if rubric not in RUBRICS:
            raise ValueError(f"unknown rubric: {rubric!r}")
        outcome = parse_response(response, self._lexicon)
        valid = isinstance(outcome, StructuredResponse)
        category_ok = (
            valid
            and outcome.judgment is not None
            and normalize_category(outcome.judgment.category)
            == normalize_category(gold.gold_category)
        )
        depth_ok = reasoning_depth(outcome) == expected_depth(gold.kind)
        if gold.gold_risk is None:
            risk_ok = valid
        else:
            risk_ok = valid and outcome.risk == gold.gold_risk
        if rubric == "identification":
            from .grammar import StageKind

            return 1.0 if valid and outcome.has_stage(StageKind.PERCEPTION) else 0.0
        if rubric == "interpretation":
            return 1.0 if category_ok else 0.0
        if rubric in ("appropriateness", "consistency"):
            return 1.0 if risk_ok else 0.0
        if rubric == "reasonability":
            return 1.0 if valid else 0.0
        if rubric == "detail":
            return min(1.0, reasoning_depth(outcome) / expected_depth(gold.kind))
        # reasoning_correct
        needs_category = expected_depth(gold.kind) >= 2
        ok = valid and depth_ok
        if needs_category:
            ok = ok and category_ok
        if gold.gold_risk is not None:
            ok = ok and risk_ok
        return 1.0 if ok else 0.0


class HttpJudge:
    """POST /v1/judge with {"response", "gold", "rubric"}; expects
    {"score": number}; scores are clamped to [0, 1] with a warning."""

    def __init__(self, cfg: EndpointConfig):
        self._cfg = cfg
        self._client = _HttpClient(cfg)

    def assess(self, response: str, gold, rubric: str) -> float:
        if rubric not in RUBRICS:
            raise ValueError(f"unknown rubric: {rubric!r}")
        from .data import record_to_dict

        gold_doc = record_to_dict(gold) if isinstance(gold, QuestionRecord) else gold
        doc = self._client.post(
            "/v1/judge",
            {"response": response, "gold": gold_doc, "rubric": rubric},
        )
        if not isinstance(doc, dict) or not isinstance(doc.get("score"), (int, float)):
            raise OracleMalformed('reply must be an object with a numeric "score" field')
        return _clamp_score(float(doc["score"]), self._cfg.base_url)
