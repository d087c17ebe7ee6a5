"""Dataset schema: question records, taxonomy, templates, and instantiation.

Records are stored as JSONL, one object per line, with the exact field
names: id, video_id, kind, question, choices, gold_letter,
reference_answer, gold_category, gold_interval, gold_risk, split, cot.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

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

__all__ = [
    "QuestionKind",
    "QuestionRecord",
    "Taxonomy",
    "TemplateLibrary",
    "VideoMeta",
    "DatasetError",
    "load_records",
    "save_records",
    "record_to_dict",
    "record_from_dict",
    "instantiate_questions",
    "split_counts",
    "canonical_open_answer",
    "build_gold_response",
    "STAGE_TEXTS",
    "LETTERS",
]

LETTERS = ("A", "B", "C", "D")
SPLITS = ("sft", "rl", "test")

# Small fixed bank of stage texts used for gold reasoning traces and by the
# toy policy's per-stage template heads (index 0 is canonical).
STAGE_TEXTS: Dict[StageKind, Tuple[str, ...]] = {
    StageKind.PERCEPTION: (
        "The scene and the moving objects are observed across the sampled frames.",
        "The overall layout and any suspicious segments of the video are inspected.",
    ),
    StageKind.COGNITION: (
        "The observed cues are interpreted to judge whether the event deviates from normality.",
        "The event is classified against known anomaly patterns and its cause is considered.",
    ),
    StageKind.ACTION: (
        "The severity of the situation is assessed and a response is recommended.",
        "Based on the judged event, an appropriate safety action is proposed.",
    ),
}


class DatasetError(ValueError):
    """Raised when a record file violates the schema."""


@dataclass(frozen=True)
class Taxonomy:
    """Category tree (3 primary types -> main categories -> leaves) + risk map."""

    types: Dict[str, Dict[str, Tuple[str, ...]]]
    risk: Dict[str, RiskLevel]
    normal_risk: RiskLevel = RiskLevel.LOW

    @classmethod
    def from_dict(cls, doc: dict) -> "Taxonomy":
        types = {
            t: {m: tuple(leaves) for m, leaves in mains.items()}
            for t, mains in doc["types"].items()
        }
        risk = {leaf: RiskLevel.from_label(label) for leaf, label in doc["risk"].items()}
        tax = cls(types=types, risk=risk,
                  normal_risk=RiskLevel.from_label(doc.get("normal_risk", "Low")))
        missing = [leaf for leaf in tax.leaves() if leaf not in risk]
        if missing:
            raise DatasetError(f"taxonomy leaves without a risk entry: {missing}")
        if any(normalize_category(leaf) == NORMAL_CATEGORY for leaf in tax.leaves()):
            raise DatasetError('"normal" is reserved and may not be a taxonomy leaf')
        return tax

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "Taxonomy":
        if path is None:
            text = resources.files("anomrl.data_files").joinpath("taxonomy.json").read_text()
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def leaves(self) -> Tuple[str, ...]:
        out: List[str] = []
        for mains in self.types.values():
            for leaf_list in mains.values():
                out.extend(leaf_list)
        return tuple(out)

    def lexicon(self) -> Tuple[str, ...]:
        """All category labels usable in <which>, including "normal"."""
        return self.leaves() + (NORMAL_CATEGORY,)

    def risk_for(self, category: str) -> RiskLevel:
        if normalize_category(category) == NORMAL_CATEGORY:
            return self.normal_risk
        canon = {normalize_category(leaf): leaf for leaf in self.leaves()}
        leaf = canon.get(normalize_category(category))
        if leaf is None:
            raise KeyError(f"unknown category: {category!r}")
        return self.risk[leaf]

    def siblings(self, category: str) -> Tuple[str, ...]:
        """Other leaves sharing the main category; empty for "normal"."""
        target = normalize_category(category)
        for mains in self.types.values():
            for leaf_list in mains.values():
                if any(normalize_category(leaf) == target for leaf in leaf_list):
                    return tuple(
                        leaf for leaf in leaf_list if normalize_category(leaf) != target
                    )
        return ()

    def contains(self, category: str) -> bool:
        canon = normalize_category(category)
        return canon == NORMAL_CATEGORY or any(
            normalize_category(leaf) == canon for leaf in self.leaves()
        )


@dataclass(frozen=True)
class Template:
    id: str
    dimension: StageKind
    mcq: bool
    open: bool
    text: str


_DIMENSIONS = {
    "perception": StageKind.PERCEPTION,
    "cognition": StageKind.COGNITION,
    "action": StageKind.ACTION,
}


@dataclass(frozen=True)
class TemplateLibrary:
    templates: Tuple[Template, ...]

    @classmethod
    def load(cls, path: Optional[Path] = None) -> "TemplateLibrary":
        if path is None:
            text = resources.files("anomrl.data_files").joinpath("templates.json").read_text()
        else:
            text = Path(path).read_text(encoding="utf-8")
        doc = json.loads(text)
        templates = tuple(
            Template(
                id=t["id"],
                dimension=_DIMENSIONS[t["dimension"]],
                mcq=bool(t["mcq"]),
                open=bool(t["open"]),
                text=t["text"],
            )
            for t in doc["templates"]
        )
        lib = cls(templates)
        for dim in _DIMENSIONS.values():
            if not lib.capable(dim, mcq=True) or not lib.capable(dim, mcq=False):
                raise DatasetError(
                    f"template library lacks MCQ/Open coverage for {dim.tag}"
                )
        return lib

    def capable(self, dimension: StageKind, mcq: bool) -> Tuple[Template, ...]:
        return tuple(
            t for t in self.templates
            if t.dimension == dimension and (t.mcq if mcq else t.open)
        )


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    video_id: str
    kind: QuestionKind
    question: str
    choices: Optional[Tuple[Tuple[str, str], ...]]
    gold_letter: Optional[str]
    reference_answer: Optional[str]
    gold_category: str
    gold_interval: Optional[TemporalInterval]
    gold_risk: Optional[RiskLevel]
    split: str
    cot: Optional[str]

    def validate(self, taxonomy: Optional[Taxonomy] = None) -> None:
        if self.kind.is_mcq:
            if self.choices is None or self.gold_letter is None:
                raise DatasetError("mcq_fields: MCQ records need choices and gold_letter")
            if self.reference_answer is not None:
                raise DatasetError("mcq_fields: MCQ records must not carry reference_answer")
            if len(self.choices) != 4 or tuple(c[0] for c in self.choices) != LETTERS:
                raise DatasetError("mcq_fields: choices must be the 4 options A-D in order")
            if self.gold_letter not in LETTERS:
                raise DatasetError(f"mcq_fields: gold_letter {self.gold_letter!r} not in A-D")
        else:
            if self.reference_answer is None:
                raise DatasetError("open_fields: open records need reference_answer")
            if self.choices is not None or self.gold_letter is not None:
                raise DatasetError("open_fields: open records must not carry choices/gold_letter")
        is_normal = normalize_category(self.gold_category) == NORMAL_CATEGORY
        if is_normal and self.gold_interval is not None:
            raise DatasetError("interval_presence: normal records must not carry gold_interval")
        if not is_normal and self.gold_interval is None:
            raise DatasetError("interval_presence: abnormal records need gold_interval")
        is_action = self.kind.dimension == StageKind.ACTION
        if is_action and self.gold_risk is None:
            raise DatasetError("risk_presence: action records need gold_risk")
        if not is_action and self.gold_risk is not None:
            raise DatasetError("risk_presence: only action records carry gold_risk")
        if self.split not in SPLITS:
            raise DatasetError(f"bad_split: split must be one of {SPLITS}")
        if (self.split == "sft") != (self.cot is not None):
            raise DatasetError("cot_presence: cot must be present iff split is sft")
        if taxonomy is not None and not taxonomy.contains(self.gold_category):
            raise DatasetError(f"unknown_category: {self.gold_category!r}")


def record_to_dict(record: QuestionRecord) -> dict:
    return {
        "id": record.id,
        "video_id": record.video_id,
        "kind": record.kind.value,
        "question": record.question,
        "choices": [list(c) for c in record.choices] if record.choices else None,
        "gold_letter": record.gold_letter,
        "reference_answer": record.reference_answer,
        "gold_category": record.gold_category,
        "gold_interval": (
            [record.gold_interval.start, record.gold_interval.end]
            if record.gold_interval
            else None
        ),
        "gold_risk": record.gold_risk.label if record.gold_risk is not None else None,
        "split": record.split,
        "cot": record.cot,
    }


def record_from_dict(doc: dict) -> QuestionRecord:
    try:
        kind = QuestionKind(doc["kind"])
    except (KeyError, ValueError):
        raise DatasetError(f"bad_kind: {doc.get('kind')!r}") from None
    interval = doc.get("gold_interval")
    if interval is not None:
        if not (isinstance(interval, (list, tuple)) and len(interval) == 2):
            raise DatasetError("bad_interval: gold_interval must be [start, end]")
        try:
            interval = TemporalInterval(float(interval[0]), float(interval[1]))
        except ValueError as exc:
            raise DatasetError(f"bad_interval: {exc}") from None
    risk = doc.get("gold_risk")
    if risk is not None:
        try:
            risk = RiskLevel.from_label(risk)
        except ValueError as exc:
            raise DatasetError(f"bad_risk: {exc}") from None
    choices = doc.get("choices")
    if choices is not None:
        choices = tuple((str(c[0]), str(c[1])) for c in choices)
    missing = [k for k in ("id", "video_id", "question", "gold_category", "split") if not doc.get(k)]
    if missing:
        raise DatasetError(f"missing_field: {missing}")
    return QuestionRecord(
        id=str(doc["id"]),
        video_id=str(doc["video_id"]),
        kind=kind,
        question=str(doc["question"]),
        choices=choices,
        gold_letter=doc.get("gold_letter"),
        reference_answer=doc.get("reference_answer"),
        gold_category=str(doc["gold_category"]),
        gold_interval=interval,
        gold_risk=risk,
        split=str(doc["split"]),
        cot=doc.get("cot"),
    )


def load_records(path, taxonomy: Optional[Taxonomy] = None) -> List[QuestionRecord]:
    """Load and validate a JSONL record file; all-or-nothing."""
    records: List[QuestionRecord] = []
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: bad_json: {exc}") from None
            try:
                record = record_from_dict(doc)
                record.validate(taxonomy)
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from None
            if record.id in seen_ids:
                raise DatasetError(f"line {lineno}: duplicate_id: {record.id!r}")
            seen_ids.add(record.id)
            records.append(record)
    return records


def save_records(records: Sequence[QuestionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), sort_keys=True))
            fh.write("\n")


def split_counts(records: Sequence[QuestionRecord]) -> Dict[str, int]:
    counts = {split: 0 for split in SPLITS}
    for record in records:
        counts[record.split] += 1
    return counts


@dataclass(frozen=True)
class VideoMeta:
    """Per-video gold annotation used to instantiate its six questions."""

    video_id: str
    category: str  # taxonomy leaf, or "normal"
    interval: Optional[TemporalInterval] = None
    risk: Optional[RiskLevel] = None

    def __post_init__(self) -> None:
        is_normal = normalize_category(self.category) == NORMAL_CATEGORY
        if is_normal != (self.interval is None):
            raise ValueError("interval must be present iff the video is abnormal")
        if is_normal != (self.risk is None):
            raise ValueError("risk must be present iff the video is abnormal")


def canonical_open_answer(dimension: StageKind, category: str, risk: RiskLevel) -> str:
    """Deterministic reference answer for an open question's gold fields."""
    canon = normalize_category(category)
    if dimension == StageKind.PERCEPTION:
        return f"the scene mainly shows {canon} activity"
    if dimension == StageKind.COGNITION:
        if canon == NORMAL_CATEGORY:
            return "the video contains no anomaly"
        return f"the video contains a {canon} anomaly"
    return f"the risk level is {risk.name.lower()}"


def build_gold_response(record: QuestionRecord) -> StructuredResponse:
    """Canonical staged response for a record's gold fields."""
    depth = expected_depth(record.kind)
    stages = tuple(
        (kind, STAGE_TEXTS[kind][0])
        for kind in (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION)
        if kind.depth <= depth
    )
    judgment = None
    if depth >= 2:
        judgment = AnomalyJudgment(record.gold_category, record.gold_interval)
    risk = record.gold_risk if depth >= 3 else None
    if record.kind.is_mcq:
        answer = record.gold_letter
    else:
        answer = record.reference_answer
    return StructuredResponse(stages=stages, judgment=judgment, risk=risk, answer=answer)


def _mcq_choices(
    meta: VideoMeta, taxonomy: Taxonomy, rng: random.Random
) -> Tuple[Tuple[Tuple[str, str], ...], str]:
    gold_text = meta.category
    siblings = list(taxonomy.siblings(meta.category))
    rng.shuffle(siblings)
    distractors = siblings[:3]
    if len(distractors) < 3:
        pool = [
            leaf for leaf in taxonomy.leaves()
            if normalize_category(leaf) != normalize_category(gold_text)
            and leaf not in distractors
        ]
        distractors += rng.sample(pool, 3 - len(distractors))
    position = rng.randrange(4)
    texts = distractors[:position] + [gold_text] + distractors[position:]
    choices = tuple(zip(LETTERS, texts))
    return choices, LETTERS[position]


def instantiate_questions(
    meta: VideoMeta,
    lib: TemplateLibrary,
    taxonomy: Taxonomy,
    rng: random.Random,
    split: str = "test",
) -> List[QuestionRecord]:
    """Create the six per-video questions: one MCQ + one open per dimension."""
    risk = meta.risk if meta.risk is not None else taxonomy.normal_risk
    records: List[QuestionRecord] = []
    index = 0
    for dimension in (StageKind.PERCEPTION, StageKind.COGNITION, StageKind.ACTION):
        for is_mcq in (True, False):
            template = rng.choice(lib.capable(dimension, mcq=is_mcq))
            kind = QuestionKind(f"{dimension.name.capitalize()}{'MCQ' if is_mcq else 'Open'}")
            choices = gold_letter = reference = None
            if is_mcq:
                choices, gold_letter = _mcq_choices(meta, taxonomy, rng)
            else:
                reference = canonical_open_answer(dimension, meta.category, risk)
            record = QuestionRecord(
                id=f"{meta.video_id}-q{index}",
                video_id=meta.video_id,
                kind=kind,
                question=template.text,
                choices=choices,
                gold_letter=gold_letter,
                reference_answer=reference,
                gold_category=meta.category,
                gold_interval=meta.interval,
                gold_risk=risk if dimension == StageKind.ACTION else None,
                split=split,
                cot=None,
            )
            if split == "sft":
                record = QuestionRecord(
                    **{**record.__dict__, "cot": render_response(build_gold_response(record))}
                )
            record.validate(taxonomy)
            records.append(record)
            index += 1
    return records
