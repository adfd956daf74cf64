"""The four-stage quiz pipeline and its ablation variants.

Stages: concept extraction, knowledge retrieval, summarization, and quiz
generation, followed by strict parsing of the generator output. The baseline
variant generates directly from the question; each ablation removes or
substitutes one stage.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from . import prompts
from .domain import (
    ConceptOrigin,
    ConceptSet,
    KnowledgeChunk,
    KnowledgeSource,
    Quiz,
    QuizSet,
    QuizValidationError,
    RunConfig,
    StudentQuestion,
    Summary,
    Variant,
    validate_quiz_set,
    write_jsonl,
)
from .gateway import ChatRequest, LlmGateway
from .knowledge import Retriever, RetrievalQuery

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    pass


class UnparseableConceptList(PipelineError):
    pass


class EmptyAfterFiltering(PipelineError):
    """The question contained nothing but stopwords."""


class MarkerCountMismatch(PipelineError):
    def __init__(self, found: int):
        super().__init__(f"expected 3 [Quiz] blocks, found {found}")
        self.found = found


class MalformedBlock(PipelineError):
    def __init__(self, block_index: int, detail: str):
        super().__init__(f"quiz block {block_index}: {detail}")
        self.block_index = block_index


class StageFailed(PipelineError):
    """Wraps a stage error with the stage name and question id."""

    def __init__(self, stage: str, question_id: str, cause: Exception):
        super().__init__(f"stage {stage} failed for question {question_id}: {cause}")
        self.stage = stage
        self.question_id = question_id
        self.cause = cause


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    raw = resources.files("conquer").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(word for word in raw.split() if word)


def _strip_punctuation(token: str) -> str:
    return "".join(ch for ch in token if ch.isalnum())


def strip_stopwords(q: StudentQuestion) -> ConceptSet:
    """Surface-word concepts: lowercase, punctuation stripped, stopwords removed.

    Fully deterministic; this is the no-concept-extraction ablation arm.
    """
    words = []
    seen = set()
    for token in q.text.split():
        word = _strip_punctuation(token).lower()
        if not word or word in stopwords() or word in seen:
            continue
        seen.add(word)
        words.append(word)
    if not words:
        raise EmptyAfterFiltering(f"question {q.id} is all stopwords")
    return ConceptSet(
        question_id=q.id,
        concepts=tuple(words[:32]),
        origin=ConceptOrigin.STOPWORD_STRIPPED,
    )


_BULLET_RE = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*")


def _parse_concept_list(text: str) -> list[str]:
    items: list[str] = []
    for line in text.splitlines():
        line = _BULLET_RE.sub("", line.strip())
        for part in line.split(","):
            item = part.strip().strip("\"'").rstrip(".;").strip()
            if item and len(item.split()) <= 6:
                items.append(item)
    deduped = []
    seen = set()
    for item in items:
        key = item.lower()
        if key not in seen:
            seen.add(key)
            deduped.append(item)
    return deduped[:32]


def extract_concepts(q: StudentQuestion, gateway: LlmGateway, cfg: RunConfig) -> ConceptSet:
    """Ask the generator model for the question's key concepts."""
    prompt = prompts.render_template("concepts", question=q.text)
    response = gateway.chat(
        ChatRequest(
            model=cfg.generator_model,
            user_prompt=prompt,
            temperature=cfg.temperature_generate,
            max_output_tokens=cfg.max_output_tokens,
        )
    )
    concepts = _parse_concept_list(response.text)
    if not concepts:
        raise UnparseableConceptList(
            f"no list-shaped content in concept response for question {q.id}"
        )
    return ConceptSet(
        question_id=q.id, concepts=tuple(concepts), origin=ConceptOrigin.LLM_EXTRACTED
    )


def assemble_chunk_context(chunks: list[KnowledgeChunk] | tuple[KnowledgeChunk, ...]) -> str:
    """Source-labeled chunk texts joined with blank lines."""
    return "\n\n".join(f"Source: {c.article_title}\n{c.text}" for c in chunks)


def summarize(
    chunks: list[KnowledgeChunk],
    q: StudentQuestion,
    gateway: LlmGateway,
    cfg: RunConfig,
) -> Summary:
    """Condense retrieved chunks into key points focused on the question."""
    if not chunks:
        raise ValueError("chunks must be non-empty")
    prompt = prompts.render_template(
        "summary", question=q.text, passages=assemble_chunk_context(chunks)
    )
    response = gateway.chat(
        ChatRequest(
            model=cfg.generator_model,
            user_prompt=prompt,
            temperature=cfg.temperature_generate,
            max_output_tokens=cfg.max_output_tokens,
        )
    )
    return Summary(
        question_id=q.id,
        text=response.text,
        source_chunks=tuple(c.ref() for c in chunks),
    )


def render_generation_prompt(
    q: StudentQuestion, context: str | None, variant: Variant
) -> str:
    """Fill the generation template (baseline or context-grounded)."""
    if variant is Variant.BASELINE:
        if context is not None:
            raise ValueError("baseline takes no context")
        return prompts.render_template(
            "baseline", area=q.area, level=q.level.label, question=q.text
        )
    if context is None:
        raise ValueError(f"variant {variant.value} requires context")
    return prompts.render_template(
        "conquer", area=q.area, level=q.level.label, question=q.text, summary=context
    )


def generate_quizzes(
    q: StudentQuestion,
    context: str | None,
    variant: Variant,
    gateway: LlmGateway,
    cfg: RunConfig,
    *,
    force_refresh: bool = False,
) -> str:
    """Run the quiz generator and return its raw text output."""
    prompt = render_generation_prompt(q, context, variant)
    response = gateway.chat(
        ChatRequest(
            model=cfg.generator_model,
            user_prompt=prompt,
            temperature=cfg.temperature_generate,
            max_output_tokens=cfg.max_output_tokens,
        ),
        force_refresh=force_refresh,
    )
    return response.text


_OPTION_RE = re.compile(r"^([A-D])[.)]\s*(.*)$")


def _parse_block(block: str, index: int) -> Quiz:
    question = None
    options: dict[str, str] = {}
    for line in block.splitlines():
        line = line.strip()
        if not line:
            continue
        if question is None and line.startswith("Quiz:"):
            question = line[len("Quiz:") :].strip()
            continue
        match = _OPTION_RE.match(line)
        if match:
            label, text = match.groups()
            if label in options:
                raise MalformedBlock(index, f"duplicate option line {label}")
            options[label] = text.strip()
    if question is None:
        raise MalformedBlock(index, "missing 'Quiz:' question line")
    missing = [label for label in "ABCD" if label not in options]
    if missing:
        raise MalformedBlock(index, f"missing option line(s) {', '.join(missing)}")
    return Quiz(question=question, options=tuple(options[label] for label in "ABCD"))


def parse_quiz_output(raw: str, question_id: str, variant: Variant) -> QuizSet:
    """Parse generator output into a validated quiz set.

    Splits on ``[Quiz]`` markers; each block must carry a ``Quiz:`` line and
    options ``A.`` through ``D.``. Leading text before the first marker is
    ignored. Raises MarkerCountMismatch, MalformedBlock, or a validation
    error from `validate_quiz_set`.
    """
    if not raw.strip():
        raise ValueError("raw generator output must be non-empty")
    blocks = re.split(r"\[Quiz\]", raw)[1:]
    if len(blocks) != 3:
        raise MarkerCountMismatch(len(blocks))
    quizzes = tuple(_parse_block(block, i) for i, block in enumerate(blocks))
    return validate_quiz_set(
        QuizSet(question_id=question_id, quizzes=quizzes, variant=variant)
    )


def render_quiz_set_text(qs: QuizSet) -> str:
    """Quiz set in the same ``[Quiz]`` block format the generator emits."""
    blocks = []
    for quiz in qs.quizzes:
        lines = ["[Quiz]", f"Quiz: {quiz.question}"]
        lines += [f"{label}. {opt}" for label, opt in zip("ABCD", quiz.options)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


@dataclass(frozen=True)
class PipelineResult:
    """Everything produced for one question under one variant."""

    question_id: str
    variant: Variant
    concepts: ConceptSet | None
    retrieved: tuple[KnowledgeChunk, ...]
    summary: Summary | None
    quiz_set: QuizSet
    raw_generator_output: str
    timing: dict[str, int]

    def __post_init__(self) -> None:
        if self.variant is Variant.BASELINE:
            if self.concepts or self.retrieved or self.summary:
                raise ValueError("baseline results carry no retrieval artifacts")
        elif self.variant is Variant.NO_SUMMARY:
            if self.summary is not None or not self.retrieved:
                raise ValueError("no_summary requires chunks and no summary")
        elif self.variant is Variant.NO_CONCEPT_EXTRACTION:
            if self.concepts is None or self.concepts.origin is not ConceptOrigin.STOPWORD_STRIPPED:
                raise ValueError("no_concept_extraction requires stopword-stripped concepts")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "variant": self.variant.value,
            "concepts": self.concepts.to_dict() if self.concepts else None,
            "retrieved": [c.to_dict() for c in self.retrieved],
            "summary": self.summary.to_dict() if self.summary else None,
            "quiz_set": self.quiz_set.to_dict(),
            "raw_generator_output": self.raw_generator_output,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineResult":
        return cls(
            question_id=data["question_id"],
            variant=Variant(data["variant"]),
            concepts=ConceptSet.from_dict(data["concepts"]) if data["concepts"] else None,
            retrieved=tuple(KnowledgeChunk.from_dict(c) for c in data["retrieved"]),
            summary=Summary.from_dict(data["summary"]) if data["summary"] else None,
            quiz_set=QuizSet.from_dict(data["quiz_set"]),
            raw_generator_output=data["raw_generator_output"],
            timing=data["timing"],
        )


@dataclass
class BatchSummary:
    n_questions: int
    n_success: int
    n_failed: int
    out_dir: Path


# Stage shapes per variant: (concept stage, knowledge source, summarize?).
_VARIANT_PLAN = {
    Variant.CONQUER: ("llm", KnowledgeSource.WIKIPEDIA, True),
    Variant.NO_CONCEPT_EXTRACTION: ("stopwords", KnowledgeSource.WIKIPEDIA, True),
    Variant.CONCEPTNET_SOURCE: ("llm", KnowledgeSource.CONCEPTNET, True),
    Variant.NO_SUMMARY: ("llm", KnowledgeSource.WIKIPEDIA, False),
}


class QuizPipeline:
    """Runs questions through the configured variant end to end."""

    def __init__(
        self,
        cfg: RunConfig,
        gateway: LlmGateway,
        retriever: Retriever,
        clock=None,
    ):
        self.cfg = cfg
        self.gateway = gateway
        self.retriever = retriever
        # Mock runs report zero durations so artifacts stay byte-reproducible.
        if clock is None:
            clock = (lambda: 0.0) if cfg.mock else time.monotonic
        self.clock = clock

    def _staged(self, stage: str, question_id: str, timing: dict, fn):
        start = self.clock()
        try:
            result = fn()
        except Exception as exc:
            raise StageFailed(stage, question_id, exc) from exc
        timing[stage] = int((self.clock() - start) * 1000)
        return result

    def _generate_and_parse(
        self, q: StudentQuestion, context: str | None, variant: Variant
    ) -> tuple[str, QuizSet]:
        raw = generate_quizzes(q, context, variant, self.gateway, self.cfg)
        try:
            return raw, parse_quiz_output(raw, q.id, variant)
        except (PipelineError, QuizValidationError):
            logger.info("regenerating unparseable output for question %s", q.id)
        raw = generate_quizzes(
            q, context, variant, self.gateway, self.cfg, force_refresh=True
        )
        return raw, parse_quiz_output(raw, q.id, variant)

    def run_question(self, q: StudentQuestion) -> PipelineResult:
        variant = self.cfg.variant
        timing: dict[str, int] = {}
        concepts = None
        chunks: tuple[KnowledgeChunk, ...] = ()
        summary = None
        context: str | None = None

        if variant is not Variant.BASELINE:
            concept_stage, source, do_summary = _VARIANT_PLAN[variant]
            if concept_stage == "llm":
                concepts = self._staged(
                    "extract_concepts", q.id, timing,
                    lambda: extract_concepts(q, self.gateway, self.cfg),
                )
            else:
                concepts = self._staged(
                    "strip_stopwords", q.id, timing, lambda: strip_stopwords(q)
                )
            query = RetrievalQuery.from_config(q.text, concepts, self.cfg)
            chunks = tuple(
                self._staged(
                    "retrieve", q.id, timing,
                    lambda: self.retriever.retrieve(query, source),
                )
            )
            if do_summary:
                summary = self._staged(
                    "summarize", q.id, timing,
                    lambda: summarize(list(chunks), q, self.gateway, self.cfg),
                )
                context = summary.text
            else:
                context = assemble_chunk_context(chunks)

        raw, quiz_set = self._staged(
            "generate", q.id, timing,
            lambda: self._generate_and_parse(q, context, variant),
        )
        return PipelineResult(
            question_id=q.id,
            variant=variant,
            concepts=concepts,
            retrieved=chunks,
            summary=summary,
            quiz_set=quiz_set,
            raw_generator_output=raw,
            timing=timing,
        )

    def run_batch(self, questions: list[StudentQuestion], out_dir: Path | str) -> BatchSummary:
        """Run every question, persisting results and failures to the run dir.

        One failing question never aborts the batch; its failure is recorded
        and the remaining questions continue.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def _safe(q: StudentQuestion):
            try:
                return q, self.run_question(q), None
            except StageFailed as exc:
                logger.warning("question %s failed: %s", q.id, exc)
                return q, None, exc

        workers = min(self.cfg.max_parallel_questions, max(len(questions), 1))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_safe, questions))

        results = [r for _, r, _ in outcomes if r is not None]
        failures = [
            {
                "question_id": q.id,
                "variant": self.cfg.variant.value,
                "stage": exc.stage,
                "error": type(exc.cause).__name__,
                "message": str(exc.cause),
            }
            for q, _, exc in outcomes
            if exc is not None
        ]

        (out_dir / "config.json").write_text(
            json.dumps(self.cfg.to_dict(), indent=2, ensure_ascii=False) + "\n", "utf-8"
        )
        write_jsonl(out_dir / "results.jsonl", (r.to_dict() for r in results))
        write_jsonl(out_dir / "quizsets.jsonl", (r.quiz_set.to_dict() for r in results))
        write_jsonl(out_dir / "failures.jsonl", failures)
        return BatchSummary(
            n_questions=len(questions),
            n_success=len(results),
            n_failed=len(failures),
            out_dir=out_dir,
        )
