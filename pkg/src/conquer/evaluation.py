"""Judge-based evaluation: dimension scoring, order-debiased pairwise
comparison, score aggregation, ablation deltas, difficulty assessment, and
dimension correlation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import prompts
from .domain import (
    DIMENSIONS,
    Choice,
    DimensionScores,
    JUDGE_DIMENSION_KEYS,
    PairOrder,
    PairVerdict,
    QuizSet,
    RunConfig,
    StudentQuestion,
    Variant,
)
from .gateway import ChatRequest, LlmGateway
from .pipeline import render_quiz_set_text

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    pass


class JudgeParseError(EvaluationError):
    pass


class NoJsonFound(JudgeParseError):
    pass


class MissingKey(JudgeParseError):
    def __init__(self, key: str):
        super().__init__(f"judge response missing key {key!r}")
        self.key = key


class UnexpectedKey(JudgeParseError):
    def __init__(self, key: str):
        super().__init__(f"judge response has unexpected key {key!r}")
        self.key = key


class ValueOutOfDomain(JudgeParseError):
    def __init__(self, key: str, value):
        super().__init__(f"judge value for {key!r} out of domain: {value!r}")
        self.key = key
        self.value = value


class JudgeUnparseable(EvaluationError):
    """Judge output stayed unparseable after the retry."""


class OrderPairIncomplete(EvaluationError):
    """A question did not contribute exactly one verdict per order."""


class InsufficientData(EvaluationError):
    pass


class EmptyInput(EvaluationError):
    pass


_FENCED_JSON_RE = re.compile(r"```json\s*(.*?)```", re.DOTALL)


def _balanced_objects(text: str) -> list[str]:
    """Top-level ``{...}`` spans, scanned string-aware."""
    spans = []
    depth = 0
    start = -1
    in_string = False
    escape = False
    for i, ch in enumerate(text):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0:
                    spans.append(text[start : i + 1])
    return spans


def parse_judge_json(raw: str, expected_keys, value_domain) -> dict[str, int]:
    """Extract the judge's final JSON object and validate it strictly.

    Takes the last ```json fenced block, or failing that the last balanced
    top-level object literal. The mapping must contain exactly
    ``expected_keys`` with integer values inside ``value_domain``.
    """
    if not raw.strip():
        raise ValueError("raw judge output must be non-empty")
    fenced = _FENCED_JSON_RE.findall(raw)
    candidates = [fenced[-1]] if fenced else _balanced_objects(raw)[-1:]
    if not candidates:
        raise NoJsonFound("no JSON object in judge output")
    try:
        data = json.loads(candidates[-1])
    except json.JSONDecodeError as exc:
        raise NoJsonFound(f"unparseable JSON in judge output: {exc}") from exc
    if not isinstance(data, dict):
        raise NoJsonFound("judge JSON is not an object")

    expected = list(expected_keys)
    for key in expected:
        if key not in data:
            raise MissingKey(key)
    for key in data:
        if key not in expected:
            raise UnexpectedKey(key)
    domain = set(value_domain)
    for key in expected:
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, int) or value not in domain:
            raise ValueOutOfDomain(key, value)
    return {key: data[key] for key in expected}


@dataclass(frozen=True)
class ScoredResult:
    """Five-dimension judge scores for one quiz set."""

    question_id: str
    variant: Variant
    scores: DimensionScores
    judge_model: str
    judge_raw: str = ""

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "variant": self.variant.value,
            "scores": self.scores.to_dict(),
            "judge_model": self.judge_model,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoredResult":
        return cls(
            question_id=data["question_id"],
            variant=Variant(data["variant"]),
            scores=DimensionScores.from_dict(data["scores"]),
            judge_model=data["judge_model"],
        )


@dataclass(frozen=True)
class DifficultyScore:
    question_id: str
    score: int

    def __post_init__(self) -> None:
        if not 1 <= self.score <= 5:
            raise ValueError(f"difficulty score {self.score} outside [1, 5]")

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "score": self.score}

    @classmethod
    def from_dict(cls, data: dict) -> "DifficultyScore":
        return cls(question_id=data["question_id"], score=data["score"])


class JudgeEvaluator:
    """LLM-as-judge calls behind the gateway, with one retry on parse failure."""

    def __init__(self, cfg: RunConfig, gateway: LlmGateway):
        self.cfg = cfg
        self.gateway = gateway

    def _judge_call(self, prompt: str, expected_keys, value_domain) -> tuple[dict, str]:
        req = ChatRequest(
            model=self.cfg.judge_model,
            user_prompt=prompt,
            temperature=self.cfg.temperature_judge,
            max_output_tokens=self.cfg.max_output_tokens,
        )
        raw = self.gateway.chat(req).text
        try:
            return parse_judge_json(raw, expected_keys, value_domain), raw
        except JudgeParseError as first:
            logger.info("re-asking judge after parse failure: %s", first)
        raw = self.gateway.chat(req, force_refresh=True).text
        try:
            return parse_judge_json(raw, expected_keys, value_domain), raw
        except JudgeParseError as exc:
            raise JudgeUnparseable(f"judge output unparseable after retry: {exc}") from exc

    def score_quiz_set(self, q: StudentQuestion, qs: QuizSet) -> ScoredResult:
        prompt = prompts.render_template(
            "judge",
            area=q.area,
            level=q.level.label,
            question=q.text,
            quiz_set=render_quiz_set_text(qs),
        )
        mapping, raw = self._judge_call(prompt, JUDGE_DIMENSION_KEYS, range(1, 6))
        scores = DimensionScores(
            **{field: mapping[key] for key, field in JUDGE_DIMENSION_KEYS.items()}
        )
        return ScoredResult(
            question_id=q.id,
            variant=qs.variant,
            scores=scores,
            judge_model=self.cfg.judge_model,
            judge_raw=raw,
        )

    def compare_pairwise(
        self,
        q: StudentQuestion,
        set_first: QuizSet,
        set_second: QuizSet,
        order: PairOrder,
    ) -> PairVerdict:
        """One ordered pairwise judgment; ``order`` records which candidate
        (A or B in the caller's bookkeeping) was shown first."""
        if set_first.question_id != set_second.question_id:
            raise ValueError("pairwise candidates must target the same question")
        prompt = prompts.render_template(
            "pairwise",
            area=q.area,
            level=q.level.label,
            question=q.text,
            quiz_set_1=render_quiz_set_text(set_first),
            quiz_set_2=render_quiz_set_text(set_second),
        )
        mapping, _ = self._judge_call(prompt, JUDGE_DIMENSION_KEYS, (1, 2))
        return PairVerdict(
            order=order,
            choices=tuple(Choice(mapping[key]) for key in JUDGE_DIMENSION_KEYS),
        )

    def assess_difficulty(self, q: StudentQuestion) -> DifficultyScore:
        prompt = prompts.render_template("difficulty", question=q.text)
        mapping, _ = self._judge_call(prompt, ("Difficulty",), range(1, 6))
        return DifficultyScore(question_id=q.id, score=mapping["Difficulty"])


@dataclass(frozen=True)
class WinRateRow:
    """Per-dimension win rates (percent) for candidate A against B.

    Rates are exact rationals so that winrate(A,B) and winrate(B,A) sum to
    100 per dimension with no rounding slack.
    """

    dimension_rates: dict[str, Fraction]
    overall: Fraction
    n_questions: int


def _a_chosen(verdict: PairVerdict, dimension: str) -> bool:
    choice = verdict.choice_for(dimension)
    if verdict.order is PairOrder.A_FIRST:
        return choice is Choice.FIRST
    return choice is Choice.SECOND


def pairwise_win_rate(
    verdict_pairs: list[tuple[PairVerdict, PairVerdict]], target: str = "a"
) -> WinRateRow:
    """Average win rate over both presentation orders.

    Per question and dimension the target earns credit 1 if chosen in both
    orders, 1/2 if chosen in exactly one, 0 otherwise.
    """
    if target not in ("a", "b"):
        raise ValueError("target must be 'a' or 'b'")
    if not verdict_pairs:
        raise EmptyInput("no verdict pairs")
    for first, second in verdict_pairs:
        if {first.order, second.order} != {PairOrder.A_FIRST, PairOrder.B_FIRST}:
            raise OrderPairIncomplete(
                "each question needs exactly one verdict per presentation order"
            )

    n = len(verdict_pairs)
    rates = {}
    for dimension in DIMENSIONS:
        credit = Fraction(0)
        for pair in verdict_pairs:
            chosen = sum(_a_chosen(v, dimension) for v in pair)
            if target == "b":
                chosen = 2 - chosen
            credit += Fraction(chosen, 2)
        rates[dimension] = 100 * credit / n
    overall = sum(rates.values()) / len(rates)
    return WinRateRow(dimension_rates=rates, overall=overall, n_questions=n)


@dataclass(frozen=True)
class ReportRow:
    """One variant's normalized dimension means (the ablation-table shape)."""

    variant: Variant
    dimension_means: dict[str, float]
    avg: float
    delta_vs_base: float | None = None


def _normalize(mean_raw: float, scale: str) -> float:
    if scale == "x20":
        return mean_raw * 20.0
    if scale == "affine":
        return (mean_raw - 1.0) / 4.0 * 100.0
    raise ValueError(f"unknown score scale {scale!r}")


def aggregate_scores(
    results: list[ScoredResult], variant: Variant, scale: str = "x20"
) -> ReportRow:
    """Mean raw 1-5 scores per dimension, normalized onto the 100-point scale."""
    rows = [r for r in results if r.variant is variant]
    if not rows:
        raise EmptyInput(f"no scored results for variant {variant.value}")
    means = {}
    for dimension in DIMENSIONS:
        raw_mean = sum(getattr(r.scores, dimension) for r in rows) / len(rows)
        means[dimension] = _normalize(raw_mean, scale)
    avg = sum(means.values()) / len(means)
    return ReportRow(variant=variant, dimension_means=means, avg=avg)


def ablation_delta(base: ReportRow, variant: ReportRow) -> float:
    """Signed percent change of the variant's average against the base's."""
    if base.avg <= 0:
        raise ValueError("base average must be positive")
    return round((variant.avg - base.avg) / base.avg * 100.0, 2)


def make_score_table(
    results: list[ScoredResult],
    variant_order: list[Variant],
    scale: str = "x20",
) -> list[ReportRow]:
    """Report rows for the given variants; deltas are relative to the first."""
    if not variant_order:
        raise EmptyInput("no variants requested")
    base = aggregate_scores(results, variant_order[0], scale)
    table = [base]
    for variant in variant_order[1:]:
        row = aggregate_scores(results, variant, scale)
        table.append(
            ReportRow(
                variant=row.variant,
                dimension_means=row.dimension_means,
                avg=row.avg,
                delta_vs_base=ablation_delta(base, row),
            )
        )
    return table


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pairwise correlation of the five dimension score series.

    Entries for a zero-variance dimension are NaN (a distinguished
    "no variance" marker, deliberately not 0).
    """

    dimensions: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    method: str

    def entry(self, dim_a: str, dim_b: str) -> float:
        i = self.dimensions.index(dim_a)
        j = self.dimensions.index(dim_b)
        return self.values[i][j]


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlation_matrix(
    results: list[ScoredResult], method: str = "pearson"
) -> CorrelationMatrix:
    """Correlation between dimension score series across scored results."""
    if len(results) < 2:
        raise InsufficientData("need at least 2 scored results")
    data = np.array(
        [[getattr(r.scores, dimension) for dimension in DIMENSIONS] for r in results],
        dtype=float,
    )
    if method == "spearman":
        data = np.column_stack([_rank_with_ties(data[:, j]) for j in range(data.shape[1])])
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")

    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    k = len(DIMENSIONS)
    values = [[float("nan")] * k for _ in range(k)]
    for i in range(k):
        if norms[i] == 0.0:
            continue
        values[i][i] = 1.0
        for j in range(i + 1, k):
            if norms[j] == 0.0:
                continue
            r = float(np.dot(centered[:, i], centered[:, j]) / (norms[i] * norms[j]))
            r = max(-1.0, min(1.0, r))
            values[i][j] = r
            values[j][i] = r
    return CorrelationMatrix(
        dimensions=DIMENSIONS,
        values=tuple(tuple(row) for row in values),
        method=method,
    )


def difficulty_means(
    scores: list[DifficultyScore], questions: list[StudentQuestion]
) -> list[dict]:
    """Mean difficulty grouped by area and by level (the dataset-audit shape)."""
    if not scores:
        raise EmptyInput("no difficulty scores")
    by_id = {q.id: q for q in questions}
    groups: dict[tuple[str, str], list[int]] = {}
    for score in scores:
        q = by_id.get(score.question_id)
        if q is None:
            raise ValueError(f"difficulty score for unknown question {score.question_id}")
        groups.setdefault(("area", q.area), []).append(score.score)
        groups.setdefault(("level", q.level.value), []).append(score.score)
    rows = []
    for (group_by, group), values in sorted(groups.items()):
        rows.append(
            {
                "group_by": group_by,
                "group": group,
                "mean_difficulty": sum(values) / len(values),
                "n_questions": len(values),
            }
        )
    return rows
