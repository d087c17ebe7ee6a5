"""Staged-response grammar: parsing, rendering, and reasoning depth.

The response format is a rigid, case-sensitive tag grammar:

    <think>
      <perception>...</perception>
      <cognition>... <which>CAT</which> [<when>S,E</when>] ...</cognition>
      <action>... <risk>Low|Medium|High</risk> ...</action>
    </think>
    <answer>...</answer>

Stages are optional but must appear in perception -> cognition -> action
order, each at most once. Whitespace between tags is ignored; whitespace
inside payloads is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Mapping, Optional, Sequence, Tuple, Union

__all__ = [
    "StageKind",
    "RiskLevel",
    "QuestionKind",
    "TemporalInterval",
    "AnomalyJudgment",
    "StructuredResponse",
    "ParseErrorClass",
    "ParseError",
    "ParseOutcome",
    "parse_response",
    "render_response",
    "validate_response",
    "reasoning_depth",
    "expected_depth",
    "normalize_category",
]


class StageKind(IntEnum):
    """Reasoning stages; the integer value is the stage depth."""

    PERCEPTION = 1
    COGNITION = 2
    ACTION = 3

    @property
    def depth(self) -> int:
        return int(self.value)

    @property
    def tag(self) -> str:
        return self.name.lower()


class RiskLevel(IntEnum):
    """Ordered severity levels; ordinal distance is ``abs(a - b)``."""

    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, label: str) -> "RiskLevel":
        try:
            return _RISK_LABELS[label]
        except KeyError:
            raise ValueError(f"unknown risk label: {label!r}") from None


_RISK_LABELS = {"Low": RiskLevel.LOW, "Medium": RiskLevel.MEDIUM, "High": RiskLevel.HIGH}


class QuestionKind(str, Enum):
    """The six question kinds: one MCQ and one open kind per stage dimension."""

    PERCEPTION_MCQ = "PerceptionMCQ"
    COGNITION_MCQ = "CognitionMCQ"
    ACTION_MCQ = "ActionMCQ"
    PERCEPTION_OPEN = "PerceptionOpen"
    COGNITION_OPEN = "CognitionOpen"
    ACTION_OPEN = "ActionOpen"

    @property
    def dimension(self) -> StageKind:
        name = self.value
        if name.startswith("Perception"):
            return StageKind.PERCEPTION
        if name.startswith("Cognition"):
            return StageKind.COGNITION
        return StageKind.ACTION

    @property
    def is_mcq(self) -> bool:
        return self.value.endswith("MCQ")


def expected_depth(kind: QuestionKind) -> int:
    """Expected reasoning depth for a question kind (1, 2, or 3)."""
    return kind.dimension.depth


NORMAL_CATEGORY = "normal"


def normalize_category(label: str) -> str:
    """Lowercase and collapse internal whitespace for category matching."""
    return " ".join(label.split()).lower()


@dataclass(frozen=True)
class TemporalInterval:
    start: float
    end: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError(f"invalid interval [{self.start}, {self.end}]")


@dataclass(frozen=True)
class AnomalyJudgment:
    category: str
    interval: Optional[TemporalInterval] = None

    def __post_init__(self) -> None:
        is_normal = normalize_category(self.category) == NORMAL_CATEGORY
        if is_normal and self.interval is not None:
            raise ValueError("normal judgment must not carry an interval")
        if not is_normal and self.interval is None:
            raise ValueError("abnormal judgment requires an interval")

    @property
    def is_abnormal(self) -> bool:
        return normalize_category(self.category) != NORMAL_CATEGORY


@dataclass(frozen=True)
class StructuredResponse:
    stages: Tuple[Tuple[StageKind, str], ...]
    judgment: Optional[AnomalyJudgment]
    risk: Optional[RiskLevel]
    answer: str
    # Provenance only; excluded from equality so round-trips compare field-exact.
    raw: str = field(default="", compare=False)

    def stage_kinds(self) -> Tuple[StageKind, ...]:
        return tuple(k for k, _ in self.stages)

    def has_stage(self, kind: StageKind) -> bool:
        return any(k == kind for k, _ in self.stages)

    def depth(self) -> int:
        return max((k.depth for k, _ in self.stages), default=0)


class ParseErrorClass(str, Enum):
    TAG_MISMATCH = "TagMismatch"
    STAGE_ORDERING = "StageOrdering"
    MISSING_ANSWER = "MissingAnswer"
    BAD_INTERVAL = "BadInterval"
    BAD_RISK = "BadRisk"
    UNKNOWN_CATEGORY = "UnknownCategory"
    DUPLICATE_STAGE = "DuplicateStage"


@dataclass(frozen=True)
class ParseError:
    error_class: ParseErrorClass
    offset: int
    message: str = ""


ParseOutcome = Union[StructuredResponse, ParseError]

_THINK_OPEN = "<think>"
_THINK_CLOSE = "</think>"
_ANSWER_OPEN = "<answer>"
_ANSWER_CLOSE = "</answer>"
_RESERVED_TAGS = (
    "<think>", "</think>", "<answer>", "</answer>",
    "<perception>", "</perception>", "<cognition>", "</cognition>",
    "<action>", "</action>", "<which>", "</which>",
    "<when>", "</when>", "<risk>", "</risk>",
)


def _skip_ws(s: str, pos: int) -> int:
    while pos < len(s) and s[pos].isspace():
        pos += 1
    return pos


def _extract_single_tag(payload: str, name: str):
    """Extract one ``<name>...</name>`` span from a stage payload.

    Returns (remaining_text, value or None, offset_of_open or None) or a
    ParseErrorClass when the tag is unclosed or duplicated.
    """
    open_tag, close_tag = f"<{name}>", f"</{name}>"
    i = payload.find(open_tag)
    if i < 0:
        return payload, None, None
    j = payload.find(close_tag, i + len(open_tag))
    if j < 0:
        return ParseErrorClass.TAG_MISMATCH, None, i
    if payload.find(open_tag, j + len(close_tag)) >= 0:
        return ParseErrorClass.TAG_MISMATCH, None, j + len(close_tag)
    value = payload[i + len(open_tag): j]
    remaining = payload[:i] + payload[j + len(close_tag):]
    return remaining, value, i


def parse_response(raw: str, taxonomy: Sequence[str]) -> ParseOutcome:
    """Parse raw model text into a StructuredResponse or a classified error.

    ``taxonomy`` is the category lexicon; it must be non-empty and contain
    the reserved label "normal". Matching is case-insensitive with internal
    whitespace collapsed. Never raises on any input text.
    """
    lexicon = {normalize_category(c): c for c in taxonomy}
    if not lexicon or NORMAL_CATEGORY not in lexicon:
        raise ValueError('taxonomy must be non-empty and contain "normal"')

    def err(cls: ParseErrorClass, offset: int, message: str = "") -> ParseError:
        return ParseError(cls, max(0, min(offset, len(raw))), message)

    pos = _skip_ws(raw, 0)
    if not raw.startswith(_THINK_OPEN, pos):
        return err(ParseErrorClass.TAG_MISMATCH, pos, "expected <think>")
    pos += len(_THINK_OPEN)

    stages = []
    seen = set()
    last_depth = 0
    judgment: Optional[AnomalyJudgment] = None
    risk: Optional[RiskLevel] = None

    while True:
        pos = _skip_ws(raw, pos)
        if raw.startswith(_THINK_CLOSE, pos):
            pos += len(_THINK_CLOSE)
            break
        for kind in (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION):
            open_tag = f"<{kind.tag}>"
            if raw.startswith(open_tag, pos):
                break
        else:
            return err(ParseErrorClass.TAG_MISMATCH, pos,
                       "expected a stage tag or </think>")
        open_pos = pos
        if kind in seen:
            return err(ParseErrorClass.DUPLICATE_STAGE, open_pos,
                       f"duplicate <{kind.tag}> stage")
        if kind.depth <= last_depth:
            return err(ParseErrorClass.STAGE_ORDERING, open_pos,
                       f"<{kind.tag}> out of order")
        close_tag = f"</{kind.tag}>"
        body_start = pos + len(open_tag)
        close_idx = raw.find(close_tag, body_start)
        if close_idx < 0:
            return err(ParseErrorClass.TAG_MISMATCH, open_pos,
                       f"unclosed <{kind.tag}>")
        payload = raw[body_start:close_idx]
        pos = close_idx + len(close_tag)
        seen.add(kind)
        last_depth = kind.depth

        if kind == StageKind.COGNITION:
            rest = _extract_single_tag(payload, "which")
            if isinstance(rest[0], ParseErrorClass):
                return err(rest[0], body_start + rest[2], "malformed <which>")
            rest, which_value, _ = rest
            out = _extract_single_tag(rest, "when")
            if isinstance(out[0], ParseErrorClass):
                return err(out[0], body_start + out[2], "malformed <when>")
            text, when_value, when_off = out

            category = None
            if which_value is not None:
                category = lexicon.get(normalize_category(which_value))
                if category is None:
                    return err(ParseErrorClass.UNKNOWN_CATEGORY, body_start,
                               f"category {which_value!r} not in taxonomy")
            interval = None
            if when_value is not None:
                if category is None or normalize_category(category) == NORMAL_CATEGORY:
                    return err(ParseErrorClass.BAD_INTERVAL, body_start + when_off,
                               "<when> requires an abnormal <which> category")
                parts = when_value.split(",")
                if len(parts) != 2:
                    return err(ParseErrorClass.BAD_INTERVAL, body_start + when_off,
                               "expected <when>start,end</when>")
                try:
                    start, end = float(parts[0]), float(parts[1])
                except ValueError:
                    return err(ParseErrorClass.BAD_INTERVAL, body_start + when_off,
                               "non-numeric interval bounds")
                if not (start == start and end == end):  # NaN guard
                    return err(ParseErrorClass.BAD_INTERVAL, body_start + when_off,
                               "non-finite interval bounds")
                if not (0.0 <= start <= end <= 1.0):
                    return err(ParseErrorClass.BAD_INTERVAL, body_start + when_off,
                               "interval must satisfy 0 <= start <= end <= 1")
                interval = TemporalInterval(start, end)
            if category is not None:
                if normalize_category(category) != NORMAL_CATEGORY and interval is None:
                    return err(ParseErrorClass.BAD_INTERVAL, body_start,
                               "abnormal category requires <when>")
                judgment = AnomalyJudgment(category, interval)
            stages.append((kind, text))
        elif kind == StageKind.ACTION:
            out = _extract_single_tag(payload, "risk")
            if isinstance(out[0], ParseErrorClass):
                return err(out[0], body_start + out[2], "malformed <risk>")
            text, risk_value, risk_off = out
            if risk_value is not None:
                if risk_value not in _RISK_LABELS:
                    return err(ParseErrorClass.BAD_RISK, body_start + (risk_off or 0),
                               f"risk must be Low, Medium, or High, got {risk_value!r}")
                risk = _RISK_LABELS[risk_value]
            stages.append((kind, text))
        else:
            stages.append((kind, payload))

    pos = _skip_ws(raw, pos)
    if not raw.startswith(_ANSWER_OPEN, pos):
        return err(ParseErrorClass.MISSING_ANSWER, pos, "expected <answer>")
    body_start = pos + len(_ANSWER_OPEN)
    close_idx = raw.find(_ANSWER_CLOSE, body_start)
    if close_idx < 0:
        return err(ParseErrorClass.MISSING_ANSWER, pos, "unclosed <answer>")
    answer = raw[body_start:close_idx]
    if not answer.strip():
        return err(ParseErrorClass.MISSING_ANSWER, body_start, "empty answer")
    pos = _skip_ws(raw, close_idx + len(_ANSWER_CLOSE))
    if pos != len(raw):
        return err(ParseErrorClass.TAG_MISMATCH, pos, "trailing content after </answer>")

    return StructuredResponse(
        stages=tuple(stages), judgment=judgment, risk=risk, answer=answer, raw=raw
    )


def _format_timestamp(value: float) -> str:
    text = f"{value:.6f}"
    if float(text) != value:
        raise ValueError(
            f"timestamp {value!r} is not stable at 6 decimals; quantize before rendering"
        )
    return text


def validate_response(resp: StructuredResponse) -> None:
    """Raise ValueError if ``resp`` violates the structural invariants."""
    last_depth = 0
    for kind, text in resp.stages:
        if kind.depth <= last_depth:
            raise ValueError("stage kinds must strictly increase in depth")
        last_depth = kind.depth
        for tag in _RESERVED_TAGS:
            if tag in text:
                raise ValueError(f"stage text must not contain reserved tag {tag}")
    if resp.judgment is not None and not resp.has_stage(StageKind.COGNITION):
        raise ValueError("judgment requires a cognition stage")
    if resp.risk is not None and not resp.has_stage(StageKind.ACTION):
        raise ValueError("risk requires an action stage")
    if not resp.answer.strip():
        raise ValueError("answer must be non-empty")
    for tag in _RESERVED_TAGS:
        if tag in resp.answer:
            raise ValueError(f"answer must not contain reserved tag {tag}")
        if resp.judgment is not None and tag in resp.judgment.category:
            raise ValueError("category must not contain reserved tags")


def render_response(resp: StructuredResponse) -> str:
    """Render the canonical text form; ``parse_response`` round-trips it."""
    validate_response(resp)
    parts = [_THINK_OPEN]
    for kind, text in resp.stages:
        parts.append(f"<{kind.tag}>")
        parts.append(text)
        if kind == StageKind.COGNITION and resp.judgment is not None:
            parts.append(f"<which>{resp.judgment.category}</which>")
            if resp.judgment.interval is not None:
                iv = resp.judgment.interval
                parts.append(
                    f"<when>{_format_timestamp(iv.start)},{_format_timestamp(iv.end)}</when>"
                )
        if kind == StageKind.ACTION and resp.risk is not None:
            parts.append(f"<risk>{resp.risk.label}</risk>")
        parts.append(f"</{kind.tag}>")
    parts.append(_THINK_CLOSE)
    parts.append(f"{_ANSWER_OPEN}{resp.answer}{_ANSWER_CLOSE}")
    return "".join(parts)


def reasoning_depth(outcome: ParseOutcome) -> int:
    """Depth of the deepest present stage; 0 for parse errors."""
    if isinstance(outcome, ParseError):
        return 0
    return outcome.depth()
