"""Core data types, validation, and JSONL serialization shared by every module."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path


class Level(Enum):
    """Education level of the asking student."""

    PRIMARY_SCHOOL = "primary_school"
    HIGH_SCHOOL = "high_school"
    PHD = "phd"

    @property
    def label(self) -> str:
        """Human-readable form used inside prompts."""
        if self is Level.PHD:
            return "PhD"
        return self.value.replace("_", " ")


class Variant(Enum):
    """Pipeline configuration under evaluation."""

    BASELINE = "baseline"
    CONQUER = "conquer"
    NO_CONCEPT_EXTRACTION = "no_concept_extraction"
    CONCEPTNET_SOURCE = "conceptnet_source"
    NO_SUMMARY = "no_summary"


class ConceptOrigin(Enum):
    LLM_EXTRACTED = "llm_extracted"
    STOPWORD_STRIPPED = "stopword_stripped"


class KnowledgeSource(Enum):
    WIKIPEDIA = "wikipedia"
    CONCEPTNET = "conceptnet"


class PairOrder(Enum):
    """Which candidate was shown first in a pairwise judgment."""

    A_FIRST = "a_first"
    B_FIRST = "b_first"


class Choice(Enum):
    """Positional pick returned by the pairwise judge (1 = first, 2 = second)."""

    FIRST = 1
    SECOND = 2


# Canonical dimension field names, in report order.
DIMENSIONS = (
    "educational_value",
    "diversity",
    "area_relevance",
    "difficulty_appropriateness",
    "comprehensiveness",
)

# Judge prompts use title-cased dimension names in their JSON schema.
JUDGE_DIMENSION_KEYS = {
    "Educational Value": "educational_value",
    "Diversity": "diversity",
    "Area Relevance": "area_relevance",
    "Difficulty Appropriateness": "difficulty_appropriateness",
    "Comprehensiveness": "comprehensiveness",
}


@lru_cache(maxsize=1)
def area_labels() -> tuple[str, ...]:
    """The 30 configured subject-area labels, loaded from the bundled config."""
    raw = resources.files("conquer").joinpath("config/areas.json").read_text("utf-8")
    labels = json.loads(raw)
    return tuple(labels)


class QuizValidationError(ValueError):
    """A quiz set candidate violated a structural invariant."""

    def __init__(self, message: str, quiz_index: int | None = None):
        super().__init__(message)
        self.quiz_index = quiz_index


class WrongQuizCount(QuizValidationError):
    pass


class WrongOptionCount(QuizValidationError):
    pass


class DuplicateOptions(QuizValidationError):
    pass


class EmptyField(QuizValidationError):
    pass


@dataclass(frozen=True)
class StudentQuestion:
    """A student question with its subject area and education level."""

    id: str
    area: str
    level: Level
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("question id must be non-empty")
        if self.area not in area_labels():
            raise ValueError(f"unknown area {self.area!r}")
        if not isinstance(self.level, Level):
            raise ValueError(f"level must be a Level, got {self.level!r}")
        if not self.text.strip():
            raise ValueError("question text must be non-empty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "area": self.area,
            "level": self.level.value,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StudentQuestion":
        return cls(
            id=data["id"],
            area=data["area"],
            level=Level(data["level"]),
            text=data["text"],
        )


@dataclass(frozen=True)
class Quiz:
    """One multiple-choice quiz: a question plus four options, answer at A.

    Structural invariants are deliberately not enforced at construction so
    that parser output can be inspected; `validate_quiz_set` is the gate.
    """

    question: str
    options: tuple[str, str, str, str]

    # The correct answer is always positioned as option A.
    CORRECT_INDEX = 0

    def to_dict(self) -> dict:
        return {"question": self.question, "options": list(self.options)}

    @classmethod
    def from_dict(cls, data: dict) -> "Quiz":
        return cls(question=data["question"], options=tuple(data["options"]))


@dataclass(frozen=True)
class QuizSet:
    """Exactly three quizzes generated for one student question."""

    question_id: str
    quizzes: tuple[Quiz, ...]
    variant: Variant

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "quizzes": [q.to_dict() for q in self.quizzes],
            "variant": self.variant.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuizSet":
        return cls(
            question_id=data["question_id"],
            quizzes=tuple(Quiz.from_dict(q) for q in data["quizzes"]),
            variant=Variant(data["variant"]),
        )


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def validate_quiz_set(raw: QuizSet) -> QuizSet:
    """Return the quiz set iff every quiz-set invariant holds.

    Raises WrongQuizCount, WrongOptionCount, DuplicateOptions, or EmptyField,
    each carrying the offending quiz index where one applies.
    """
    if len(raw.quizzes) != 3:
        raise WrongQuizCount(f"expected 3 quizzes, got {len(raw.quizzes)}")
    for i, quiz in enumerate(raw.quizzes):
        if not quiz.question.strip():
            raise EmptyField(f"quiz {i}: empty question", quiz_index=i)
        if len(quiz.options) != 4:
            raise WrongOptionCount(
                f"quiz {i}: expected 4 options, got {len(quiz.options)}", quiz_index=i
            )
        for label, option in zip("ABCD", quiz.options):
            if not option.strip():
                raise EmptyField(f"quiz {i}: empty option {label}", quiz_index=i)
        normalized = [_normalize_ws(o) for o in quiz.options]
        if len(set(normalized)) != 4:
            raise DuplicateOptions(f"quiz {i}: options are not distinct", quiz_index=i)
    return raw


@dataclass(frozen=True)
class ConceptSet:
    """Ordered key concepts derived from one student question."""

    question_id: str
    concepts: tuple[str, ...]
    origin: ConceptOrigin

    def __post_init__(self) -> None:
        if not 1 <= len(self.concepts) <= 32:
            raise ValueError(f"expected 1..32 concepts, got {len(self.concepts)}")
        seen = set()
        for concept in self.concepts:
            if not concept or concept != concept.strip():
                raise ValueError(f"concept {concept!r} is empty or untrimmed")
            key = concept.lower()
            if key in seen:
                raise ValueError(f"duplicate concept {concept!r}")
            seen.add(key)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "concepts": list(self.concepts),
            "origin": self.origin.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptSet":
        return cls(
            question_id=data["question_id"],
            concepts=tuple(data["concepts"]),
            origin=ConceptOrigin(data["origin"]),
        )


@dataclass(frozen=True)
class KnowledgeChunk:
    """A scored span of retrieved source text with provenance."""

    source: KnowledgeSource
    concept: str
    article_title: str
    text: str
    token_span: tuple[int, int]
    similarity: float | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("chunk text must be non-empty")
        start, end = self.token_span
        if not 0 <= start < end:
            raise ValueError(f"invalid token span ({start}, {end})")
        if self.similarity is not None and not -1.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity {self.similarity} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "source": self.source.value,
            "concept": self.concept,
            "article_title": self.article_title,
            "text": self.text,
            "token_span": list(self.token_span),
            "similarity": self.similarity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KnowledgeChunk":
        return cls(
            source=KnowledgeSource(data["source"]),
            concept=data["concept"],
            article_title=data["article_title"],
            text=data["text"],
            token_span=tuple(data["token_span"]),
            similarity=data["similarity"],
        )

    def ref(self) -> "ChunkRef":
        return ChunkRef(
            source=self.source,
            article_title=self.article_title,
            token_span=self.token_span,
        )


@dataclass(frozen=True)
class ChunkRef:
    """Provenance reference to a retrieved chunk."""

    source: KnowledgeSource
    article_title: str
    token_span: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "source": self.source.value,
            "article_title": self.article_title,
            "token_span": list(self.token_span),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChunkRef":
        return cls(
            source=KnowledgeSource(data["source"]),
            article_title=data["article_title"],
            token_span=tuple(data["token_span"]),
        )


@dataclass(frozen=True)
class Summary:
    """Condensed key points of the retrieved material for one question."""

    question_id: str
    text: str
    source_chunks: tuple[ChunkRef, ...]

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("summary text must be non-empty")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "text": self.text,
            "source_chunks": [ref.to_dict() for ref in self.source_chunks],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Summary":
        return cls(
            question_id=data["question_id"],
            text=data["text"],
            source_chunks=tuple(ChunkRef.from_dict(r) for r in data["source_chunks"]),
        )


@dataclass(frozen=True)
class DimensionScores:
    """The five 1-5 judge scores for one quiz set."""

    educational_value: int
    diversity: int
    area_relevance: int
    difficulty_appropriateness: int
    comprehensiveness: int

    def __post_init__(self) -> None:
        for name in DIMENSIONS:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or not 1 <= value <= 5:
                raise ValueError(f"{name} must be an integer in [1, 5], got {value!r}")

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in DIMENSIONS}

    def to_dict(self) -> dict:
        return self.as_dict()

    @classmethod
    def from_dict(cls, data: dict) -> "DimensionScores":
        return cls(**{name: data[name] for name in DIMENSIONS})


@dataclass(frozen=True)
class PairVerdict:
    """Per-dimension winner choices from one ordered pairwise judgment."""

    order: PairOrder
    choices: tuple[Choice, Choice, Choice, Choice, Choice]

    def choice_for(self, dimension: str) -> Choice:
        return self.choices[DIMENSIONS.index(dimension)]

    def to_dict(self) -> dict:
        return {
            "order": self.order.value,
            "choices": {name: c.value for name, c in zip(DIMENSIONS, self.choices)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PairVerdict":
        return cls(
            order=PairOrder(data["order"]),
            choices=tuple(Choice(data["choices"][name]) for name in DIMENSIONS),
        )


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one pipeline/evaluation run."""

    variant: Variant = Variant.CONQUER
    chunk_size: int = 128
    chunk_overlap: int = 50
    top_k: int = 3
    generator_model: str = "gpt-4o-mini"
    judge_model: str = "gpt-4o"
    embedding_model: str = "text-embedding-3-large"
    cache_dir: Path = Path(".conquer-cache")
    seed: int = 0
    max_parallel_questions: int = 4
    mock: bool = False
    corpus_dir: Path | None = None
    temperature_generate: float = 0.7
    temperature_judge: float = 0.0
    max_output_tokens: int = 1024
    requests_per_minute: int = 600
    max_attempts: int = 4
    per_concept_top_k: bool = False
    score_scale: str = "x20"  # or "affine": (mean-1)/4*100
    correlation_method: str = "pearson"  # or "spearman"
    conceptnet_edge_limit: int = 20

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")
        if not 0 <= self.chunk_overlap < self.chunk_size:
            raise ValueError("chunk_overlap must satisfy 0 <= overlap < chunk_size")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_parallel_questions < 1:
            raise ValueError("max_parallel_questions must be >= 1")
        if self.score_scale not in ("x20", "affine"):
            raise ValueError(f"unknown score_scale {self.score_scale!r}")
        if self.correlation_method not in ("pearson", "spearman"):
            raise ValueError(f"unknown correlation_method {self.correlation_method!r}")

    def to_dict(self) -> dict:
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Variant):
                value = value.value
            elif isinstance(value, Path):
                value = str(value)
            data[f.name] = value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = dict(data)
        if "variant" in kwargs:
            kwargs["variant"] = Variant(kwargs["variant"])
        if kwargs.get("cache_dir") is not None:
            kwargs["cache_dir"] = Path(kwargs["cache_dir"])
        if kwargs.get("corpus_dir") is not None:
            kwargs["corpus_dir"] = Path(kwargs["corpus_dir"])
        return cls(**kwargs)


def canonical_json(data) -> str:
    """Stable serialization used for content digests."""
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: Path | str, rows) -> None:
    """Write one JSON object per line, UTF-8."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path: Path | str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
