from __future__ import annotations

import random
import string
from pathlib import Path

import pytest

from anomrl.data import Taxonomy, TemplateLibrary
from anomrl.grammar import (
    AnomalyJudgment,
    RiskLevel,
    StageKind,
    StructuredResponse,
    TemporalInterval,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def taxonomy() -> Taxonomy:
    return Taxonomy.load()


@pytest.fixture(scope="session")
def lexicon(taxonomy):
    return taxonomy.lexicon()


@pytest.fixture(scope="session")
def library() -> TemplateLibrary:
    return TemplateLibrary.load()


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


def _stable_timestamp(rng: random.Random) -> float:
    # Values on the 1e-6 grid survive the canonical 6-decimal rendering.
    return rng.randint(0, 10**6) / 10**6


def _words(rng: random.Random, low: int = 1, high: int = 6) -> str:
    return " ".join(
        "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 8)))
        for _ in range(rng.randint(low, high))
    )


def random_response(rng: random.Random, categories) -> StructuredResponse:
    """A random structurally valid response, renderable and re-parseable."""
    kinds = sorted(
        rng.sample(list(StageKind), rng.randint(1, 3)), key=lambda k: k.depth
    )
    stages = tuple((kind, _words(rng)) for kind in kinds)
    judgment = None
    if StageKind.COGNITION in kinds and rng.random() < 0.7:
        category = rng.choice(list(categories))
        if category.lower() == "normal":
            judgment = AnomalyJudgment(category)
        else:
            a, b = sorted((_stable_timestamp(rng), _stable_timestamp(rng)))
            judgment = AnomalyJudgment(category, TemporalInterval(a, b))
    risk = None
    if StageKind.ACTION in kinds and rng.random() < 0.7:
        risk = rng.choice(list(RiskLevel))
    return StructuredResponse(
        stages=stages, judgment=judgment, risk=risk, answer=_words(rng)
    )


@pytest.fixture(scope="session")
def make_response():
    return random_response
