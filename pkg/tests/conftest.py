from __future__ import annotations

from pathlib import Path

import pytest

from conquer.dataset import load_reference_dataset
from conquer.domain import Level, Quiz, QuizSet, RunConfig, StudentQuestion, Variant
from conquer.gateway import LlmGateway
from conquer.knowledge import build_fixture_corpus
from conquer.mock import MockBackend

PLANT_QUESTION_TEXT = "What happens to a plant when it doesn't get enough sunlight or water?"
PLANT_CONCEPT_WORDS = (
    "plant", "sunlight", "water", "photosynthesis", "growth", "stress", "environment",
)


def make_question(
    qid: str = "biology-primary_school-03",
    area: str = "biology",
    level: Level = Level.PRIMARY_SCHOOL,
    text: str = PLANT_QUESTION_TEXT,
) -> StudentQuestion:
    return StudentQuestion(id=qid, area=area, level=level, text=text)


def make_quiz(
    question: str = "What is the capital city of China?",
    options: tuple[str, ...] = ("Beijing", "Chengdu", "Shanghai", "Hangzhou"),
) -> Quiz:
    return Quiz(question=question, options=tuple(options))


def make_quiz_set(
    qid: str = "biology-primary_school-03",
    variant: Variant = Variant.BASELINE,
    quizzes: tuple[Quiz, ...] | None = None,
) -> QuizSet:
    if quizzes is None:
        quizzes = (
            make_quiz(),
            make_quiz("What continent is Beijing located?", ("Asia", "Europe", "Africa", "North America")),
            make_quiz("Which river flows through Beijing?", ("Yongding", "Yangtze", "Mekong", "Nile")),
        )
    return QuizSet(question_id=qid, quizzes=quizzes, variant=variant)


@pytest.fixture
def plant_question() -> StudentQuestion:
    return make_question()


@pytest.fixture
def mock_cfg(tmp_path: Path) -> RunConfig:
    return RunConfig(
        mock=True,
        seed=7,
        cache_dir=tmp_path / "cache",
        max_parallel_questions=2,
    )


@pytest.fixture
def mock_gateway(mock_cfg: RunConfig) -> LlmGateway:
    return LlmGateway(MockBackend(seed=mock_cfg.seed), cache_dir=mock_cfg.cache_dir)


@pytest.fixture(scope="session")
def biology_questions() -> list[StudentQuestion]:
    ds = load_reference_dataset()
    return [q for q in ds.questions if q.area == "biology"]


@pytest.fixture
def corpus_dir(tmp_path: Path, biology_questions) -> Path:
    corpus = tmp_path / "corpus"
    build_fixture_corpus(biology_questions, corpus, extra_concepts=PLANT_CONCEPT_WORDS)
    return corpus
