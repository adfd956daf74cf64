"""Build, validate, and persist the study question dataset.

The full grid is 30 areas x 3 levels x n questions per cell. A reference
dataset ships with the package so downstream commands and tests run without
any provider access; its biology cells carry the canonical example questions
and every other cell holds deterministic filler.
"""

from __future__ import annotations

import datetime
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import prompts
from .domain import Level, RunConfig, StudentQuestion, area_labels, write_jsonl
from .gateway import ChatRequest, LlmGateway
from .knowledge import normalize_term

logger = logging.getLogger(__name__)

MOCK_TIMESTAMP = "1970-01-01T00:00:00Z"


class DatasetError(Exception):
    pass


class CellGenerationFailed(DatasetError):
    def __init__(self, area: str, level: Level, detail: str):
        super().__init__(f"cell ({area}, {level.value}): {detail}")
        self.area = area
        self.level = level


class SchemaViolation(DatasetError):
    def __init__(self, detail: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + detail)
        self.line = line


class CellCountMismatch(DatasetError):
    def __init__(self, area: str, level: str, expected: int, found: int):
        super().__init__(
            f"cell ({area}, {level}) has {found} questions, expected {expected}"
        )
        self.area = area
        self.level = level


@dataclass(frozen=True)
class DatasetManifest:
    areas: tuple[str, ...]
    levels: tuple[str, ...]
    n_per_cell: int
    generator_model: str
    created_at: str

    def to_dict(self) -> dict:
        return {
            "areas": list(self.areas),
            "levels": list(self.levels),
            "n_per_cell": self.n_per_cell,
            "generator_model": self.generator_model,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(
            areas=tuple(data["areas"]),
            levels=tuple(data["levels"]),
            n_per_cell=data["n_per_cell"],
            generator_model=data["generator_model"],
            created_at=data["created_at"],
        )


@dataclass(frozen=True)
class QuestionDataset:
    questions: tuple[StudentQuestion, ...]
    manifest: DatasetManifest

    def by_id(self) -> dict[str, StudentQuestion]:
        return {q.id: q for q in self.questions}


def validate_dataset(ds: QuestionDataset) -> QuestionDataset:
    """Check id uniqueness and exact per-cell counts against the manifest."""
    seen_ids = set()
    for q in ds.questions:
        if q.id in seen_ids:
            raise SchemaViolation(f"duplicate question id {q.id!r}")
        seen_ids.add(q.id)

    counts: dict[tuple[str, str], int] = {}
    for q in ds.questions:
        counts[(q.area, q.level.value)] = counts.get((q.area, q.level.value), 0) + 1
    expected_cells = {
        (area, level) for area in ds.manifest.areas for level in ds.manifest.levels
    }
    for cell, found in counts.items():
        if cell not in expected_cells:
            raise CellCountMismatch(cell[0], cell[1], 0, found)
    for area, level in sorted(expected_cells):
        found = counts.get((area, level), 0)
        if found != ds.manifest.n_per_cell:
            raise CellCountMismatch(area, level, ds.manifest.n_per_cell, found)
    return ds


def _parse_numbered_list(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        line = line.strip()
        stripped = None
        if line[:1] in "-*":
            stripped = line[1:].strip()
        else:
            head, sep, rest = line.partition(".")
            if not (head.isdigit() and sep):
                head, sep, rest = line.partition(")")
            if head.isdigit() and sep:
                stripped = rest.strip()
        if stripped:
            items.append(stripped)
    return items


def _generate_cell(
    area: str,
    level: Level,
    n_per_cell: int,
    model: str,
    gateway: LlmGateway,
    cfg: RunConfig,
) -> list[StudentQuestion]:
    prompt = prompts.render_template(
        "dataset", area=area, level=level.label, n=str(n_per_cell)
    )
    req = ChatRequest(
        model=model,
        user_prompt=prompt,
        temperature=cfg.temperature_generate,
        max_output_tokens=cfg.max_output_tokens,
    )
    items = _parse_numbered_list(gateway.chat(req).text)
    if len(items) != n_per_cell:
        logger.info(
            "cell (%s, %s) returned %d items, retrying", area, level.value, len(items)
        )
        items = _parse_numbered_list(gateway.chat(req, force_refresh=True).text)
    if len(items) != n_per_cell:
        raise CellGenerationFailed(
            area, level, f"expected {n_per_cell} questions, got {len(items)}"
        )
    return [
        StudentQuestion(
            id=f"{normalize_term(area)}-{level.value}-{i + 1:02d}",
            area=area,
            level=level,
            text=text,
        )
        for i, text in enumerate(items)
    ]


def generate_question_set(
    areas: list[str],
    levels: list[Level],
    n_per_cell: int,
    model: str,
    gateway: LlmGateway,
    cfg: RunConfig,
) -> QuestionDataset:
    """One generation call per (area, level) cell, with one retry per cell.

    Cells generate concurrently (bounded by the run's parallelism setting);
    output order stays (area, level, index) regardless of completion order.
    """
    if not areas:
        raise ValueError("areas must be non-empty")
    if n_per_cell < 1:
        raise ValueError("n_per_cell must be >= 1")

    cells = [(area, level) for area in areas for level in levels]
    workers = min(cfg.max_parallel_questions, len(cells))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_cell = list(
            pool.map(
                lambda cell: _generate_cell(cell[0], cell[1], n_per_cell, model, gateway, cfg),
                cells,
            )
        )
    questions = [q for cell_questions in per_cell for q in cell_questions]

    created_at = (
        MOCK_TIMESTAMP
        if cfg.mock
        else datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    )
    manifest = DatasetManifest(
        areas=tuple(areas),
        levels=tuple(level.value for level in levels),
        n_per_cell=n_per_cell,
        generator_model=model,
        created_at=created_at,
    )
    return validate_dataset(QuestionDataset(questions=tuple(questions), manifest=manifest))


def _manifest_path(dataset_path: Path) -> Path:
    return dataset_path.with_name(f"{dataset_path.stem}.manifest.json")


def save_dataset(ds: QuestionDataset, path: Path | str) -> None:
    path = Path(path)
    write_jsonl(path, (q.to_dict() for q in ds.questions))
    _manifest_path(path).write_text(
        json.dumps(ds.manifest.to_dict(), indent=2, ensure_ascii=False) + "\n", "utf-8"
    )


def load_dataset(path: Path | str) -> QuestionDataset:
    """Load and re-validate a persisted dataset (and its manifest)."""
    path = Path(path)
    manifest_path = _manifest_path(path)
    if not manifest_path.exists():
        raise SchemaViolation(f"manifest not found at {manifest_path}")
    manifest = DatasetManifest.from_dict(json.loads(manifest_path.read_text("utf-8")))

    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                questions.append(StudentQuestion.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise SchemaViolation(str(exc), line=lineno) from exc
    return validate_dataset(QuestionDataset(questions=tuple(questions), manifest=manifest))


# Canonical biology cells of the committed reference dataset.
REFERENCE_BIOLOGY_QUESTIONS: dict[Level, tuple[str, ...]] = {
    Level.PRIMARY_SCHOOL: (
        "What are the ways plants and animals adapt to their environments to survive?",
        "How do some animals use camouflage to protect themselves from predators?",
        "What happens to a plant when it doesn't get enough sunlight or water?",
        "Why do some animals migrate long distances, and how do they find their way?",
        "How do different animal habitats, like forests and deserts, affect the types of species that live there?",
    ),
    Level.HIGH_SCHOOL: (
        "What are the various methods scientists use to study ecosystems, and what challenges do they face in collecting data?",
        "How do genetic variations within a population contribute to natural selection and evolution?",
        "What role do enzymes play in biochemical reactions, and how can temperature and pH affect their activity?",
        "In what ways do human activities impact biodiversity, and what strategies can be employed to mitigate these effects?",
        "How do different types of symbiotic relationships (like mutualism and parasitism) influence ecological balance?",
    ),
    Level.PHD: (
        "What are the current methodologies used in studying the microbiome's influence on human health, and how do they differ in their approaches?",
        "How does epigenetic modification play a role in the adaptation of organisms to their environments over generations?",
        "What are the key differences in the mechanisms of action between CRISPR technologies and traditional gene editing techniques?",
        "In studying evolutionary biology, how do we measure and interpret the rate of speciation in various ecosystems?",
        "What ethical considerations arise in the manipulation of genetic material in research, particularly regarding biodiversity conservation?",
    ),
}


def build_reference_dataset(seed: int = 0) -> QuestionDataset:
    """Regenerate the committed reference dataset: deterministic filler for
    every cell, with the biology cells replaced by the canonical questions."""
    import tempfile

    from .mock import MockBackend

    with tempfile.TemporaryDirectory() as cache_dir:
        cfg = RunConfig(mock=True, seed=seed, cache_dir=Path(cache_dir))
        gateway = LlmGateway(MockBackend(seed=seed), cache_dir=cfg.cache_dir)
        ds = generate_question_set(
            list(area_labels()), list(Level), 5, "mock-reference", gateway, cfg
        )
    questions = []
    for q in ds.questions:
        if q.area == "biology":
            index = int(q.id.rsplit("-", 1)[1]) - 1
            questions.append(
                StudentQuestion(
                    id=q.id,
                    area=q.area,
                    level=q.level,
                    text=REFERENCE_BIOLOGY_QUESTIONS[q.level][index],
                )
            )
        else:
            questions.append(q)
    return validate_dataset(QuestionDataset(questions=tuple(questions), manifest=ds.manifest))


def reference_dataset_path() -> Path:
    return Path(str(resources.files("conquer").joinpath("data/dataset.jsonl")))


def load_reference_dataset() -> QuestionDataset:
    return load_dataset(reference_dataset_path())
