"""Command-line entry point: dataset creation, pipeline runs, judging,
pairwise comparison, ablation sweeps, and report emission."""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .dataset import (
    DatasetError,
    generate_question_set,
    load_dataset,
    save_dataset,
)
from .domain import (
    Level,
    PairOrder,
    PairVerdict,
    RunConfig,
    Variant,
    area_labels,
    canonical_json,
    read_jsonl,
    write_jsonl,
)
from .evaluation import (
    DifficultyScore,
    EvaluationError,
    JudgeEvaluator,
    ScoredResult,
    correlation_matrix,
    difficulty_means,
    make_score_table,
    pairwise_win_rate,
)
from .gateway import (
    ENV_API_KEY,
    GatewayError,
    LlmGateway,
    OpenAIBackend,
    RateLimiter,
    resolve_credentials,
)
from .knowledge import KnowledgeError, Retriever
from .mock import MockBackend
from .pipeline import PipelineResult, QuizPipeline

logger = logging.getLogger(__name__)


def _reports():
    # Deferred so commands that render no figures skip the matplotlib import.
    from . import reports

    return reports


ABLATION_VARIANTS = [
    Variant.CONQUER,
    Variant.NO_CONCEPT_EXTRACTION,
    Variant.CONCEPTNET_SOURCE,
    Variant.NO_SUMMARY,
]

REPORT_VARIANT_ORDER = [
    Variant.CONQUER,
    Variant.BASELINE,
    Variant.NO_CONCEPT_EXTRACTION,
    Variant.CONCEPTNET_SOURCE,
    Variant.NO_SUMMARY,
]


class CliError(Exception):
    code = 2


class QuestionSetMismatch(CliError):
    def __init__(self, only_a: list[str], only_b: list[str]):
        super().__init__(
            "runs cover different question ids; "
            f"only in A: {sorted(only_a)}, only in B: {sorted(only_b)}"
        )


_ENV_CONFIG_OVERRIDES = {
    "CONQUER_CACHE_DIR": "cache_dir",
    "CONQUER_GENERATOR_MODEL": "generator_model",
    "CONQUER_JUDGE_MODEL": "judge_model",
    "CONQUER_EMBEDDING_MODEL": "embedding_model",
}

_FLAG_CONFIG_FIELDS = {
    "variant": "variant",
    "chunk_size": "chunk_size",
    "chunk_overlap": "chunk_overlap",
    "top_k": "top_k",
    "seed": "seed",
    "max_parallel": "max_parallel_questions",
    "cache_dir": "cache_dir",
    "corpus_dir": "corpus_dir",
    "generator_model": "generator_model",
    "judge_model": "judge_model",
    "embedding_model": "embedding_model",
    "score_scale": "score_scale",
    "correlation_method": "correlation_method",
}


def build_config(args: argparse.Namespace) -> RunConfig:
    """Assemble the run config with precedence flags > env > file > defaults."""
    data = RunConfig().to_dict()
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        file_data = json.loads(path.read_text("utf-8"))
        unknown = set(file_data) - set(data)
        if unknown:
            raise CliError(f"unknown config fields: {sorted(unknown)}")
        data.update(file_data)
    for env_name, field in _ENV_CONFIG_OVERRIDES.items():
        value = os.environ.get(env_name)
        if value:
            data[field] = value
    for arg_name, field in _FLAG_CONFIG_FIELDS.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            data[field] = str(value) if isinstance(value, Path) else value
    if getattr(args, "mock", False):
        data["mock"] = True
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def build_gateway(cfg: RunConfig, *, judge: bool = False) -> LlmGateway:
    if cfg.mock:
        return LlmGateway(MockBackend(seed=cfg.seed), cache_dir=cfg.cache_dir)
    base, key = resolve_credentials(judge=judge)
    if not key:
        raise CliError(f"no API key configured; set {ENV_API_KEY} or pass --mock")
    backend = OpenAIBackend(base, key, max_attempts=cfg.max_attempts)
    limiter = RateLimiter(cfg.requests_per_minute)
    return LlmGateway(backend, cache_dir=cfg.cache_dir, rate_limiter=limiter)


def compute_run_id(cfg: RunConfig, dataset_path: Path) -> str:
    """Content-addressed run id; mock runs omit the timestamp so reruns land
    on identical paths."""
    digest = hashlib.sha256()
    digest.update(canonical_json(cfg.to_dict()).encode("utf-8"))
    digest.update(Path(dataset_path).read_bytes())
    head = digest.hexdigest()[:12]
    if cfg.mock:
        return head
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return f"{head}-{stamp}"


def _parse_areas(raw: str | None) -> list[str]:
    if not raw:
        return list(area_labels())
    areas = [item.strip() for item in raw.split(",") if item.strip()]
    unknown = [a for a in areas if a not in area_labels()]
    if unknown:
        raise CliError(f"unknown areas: {unknown}; configured labels: {list(area_labels())}")
    return areas


def _parse_levels(raw: str | None) -> list[Level]:
    if not raw:
        return list(Level)
    try:
        return [Level(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError as exc:
        raise CliError(f"unknown level: {exc}") from exc


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    areas = _parse_areas(args.areas)
    levels = _parse_levels(args.levels)
    gateway = build_gateway(cfg)
    ds = generate_question_set(
        areas, levels, args.n_per_cell, cfg.generator_model, gateway, cfg
    )
    save_dataset(ds, args.out)
    print(
        f"wrote {len(ds.questions)} questions "
        f"({len(areas)} areas x {len(levels)} levels x {args.n_per_cell}) -> {args.out}"
    )
    return 0


def _load_run_results(run_dir: Path) -> list[PipelineResult]:
    results_path = run_dir / "results.jsonl"
    if not results_path.exists():
        raise CliError(f"no results.jsonl in {run_dir}")
    return [PipelineResult.from_dict(row) for row in read_jsonl(results_path)]


def _run_variant(
    cfg: RunConfig, questions, gateway: LlmGateway, out_dir: Path
):
    retriever = Retriever(gateway, cfg)
    pipeline = QuizPipeline(cfg, gateway, retriever)
    return pipeline.run_batch(questions, out_dir)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    gateway = build_gateway(cfg)
    out_dir = Path(args.out) if args.out else Path("runs") / compute_run_id(cfg, args.dataset)
    summary = _run_variant(cfg, list(ds.questions), gateway, out_dir)
    print(
        f"run {cfg.variant.value}: {summary.n_success} succeeded, "
        f"{summary.n_failed} failed -> {out_dir}"
    )
    print(f"cache hit rate: {gateway.cache_hit_rate:.1%}")
    return 0


def _score_run(
    cfg: RunConfig,
    evaluator: JudgeEvaluator,
    run_dir: Path,
    questions_by_id: dict,
) -> list[ScoredResult]:
    """Judge every result in a run dir; write scores.jsonl and failures."""
    results = _load_run_results(run_dir)
    missing = [r.question_id for r in results if r.question_id not in questions_by_id]
    if missing:
        raise CliError(f"run references questions missing from the dataset: {missing}")

    def _one(result: PipelineResult):
        try:
            return evaluator.score_quiz_set(
                questions_by_id[result.question_id], result.quiz_set
            ), None
        except (EvaluationError, GatewayError) as exc:
            return None, {
                "question_id": result.question_id,
                "variant": result.variant.value,
                "error": type(exc).__name__,
                "message": str(exc),
            }

    workers = min(cfg.max_parallel_questions, max(len(results), 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(_one, results))
    scored = [s for s, _ in outcomes if s is not None]
    failures = [f for _, f in outcomes if f is not None]
    write_jsonl(run_dir / "scores.jsonl", (s.to_dict() for s in scored))
    write_jsonl(run_dir / "score_failures.jsonl", failures)
    if failures:
        logger.warning("%d quiz sets could not be scored", len(failures))
    return scored


def cmd_score(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    evaluator = JudgeEvaluator(cfg, build_gateway(cfg, judge=True))
    scored = _score_run(cfg, evaluator, Path(args.run), ds.by_id())
    print(f"scored {len(scored)} quiz sets -> {Path(args.run) / 'scores.jsonl'}")
    return 0


def _run_variant_of(run_dir: Path) -> str:
    config_path = run_dir / "config.json"
    if config_path.exists():
        return json.loads(config_path.read_text("utf-8")).get("variant", "unknown")
    return "unknown"


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    by_id = ds.by_id()
    run_a, run_b = Path(args.run_a), Path(args.run_b)
    sets_a = {r.question_id: r.quiz_set for r in _load_run_results(run_a)}
    sets_b = {r.question_id: r.quiz_set for r in _load_run_results(run_b)}
    if set(sets_a) != set(sets_b):
        raise QuestionSetMismatch(
            sorted(set(sets_a) - set(sets_b)), sorted(set(sets_b) - set(sets_a))
        )
    variant_a, variant_b = _run_variant_of(run_a), _run_variant_of(run_b)
    ordered_ids = [q.id for q in ds.questions if q.id in sets_a]

    evaluator = JudgeEvaluator(cfg, build_gateway(cfg, judge=True))

    def _both_orders(qid: str):
        q = by_id[qid]
        try:
            forward = evaluator.compare_pairwise(
                q, sets_a[qid], sets_b[qid], PairOrder.A_FIRST
            )
            reverse = evaluator.compare_pairwise(
                q, sets_b[qid], sets_a[qid], PairOrder.B_FIRST
            )
            return qid, (forward, reverse), None
        except (EvaluationError, GatewayError) as exc:
            return qid, None, {"question_id": qid, "error": type(exc).__name__, "message": str(exc)}

    workers = min(cfg.max_parallel_questions, max(len(ordered_ids), 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(_both_orders, ordered_ids))

    out_dir = Path(args.out)
    pairs = [pair for _, pair, _ in outcomes if pair is not None]
    failures = [f for _, _, f in outcomes if f is not None]
    write_jsonl(
        out_dir / "verdicts.jsonl",
        (
            {
                "question_id": qid,
                "variant_a": variant_a,
                "variant_b": variant_b,
                "verdicts": [pair[0].to_dict(), pair[1].to_dict()],
            }
            for qid, pair, _ in outcomes
            if pair is not None
        ),
    )
    write_jsonl(out_dir / "compare_failures.jsonl", failures)
    if not pairs:
        raise CliError("no pairwise judgments completed")
    row = pairwise_win_rate(pairs, target="a")
    _reports().emit_winrate_report(row, variant_a, variant_b, out_dir)
    print(
        f"win rate {variant_a} vs {variant_b}: {float(row.overall):.2f}% overall "
        f"over {row.n_questions} questions -> {out_dir / 'report_winrate.csv'}"
    )
    return 0


def cmd_ablation(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    questions = list(ds.questions)
    out_dir = Path(args.out)
    gateway = build_gateway(cfg)
    evaluator = JudgeEvaluator(cfg, build_gateway(cfg, judge=True))

    all_scored: list[ScoredResult] = []
    for variant in ABLATION_VARIANTS:
        vcfg = dataclasses.replace(cfg, variant=variant)
        run_dir = out_dir / "runs" / variant.value
        summary = _run_variant(vcfg, questions, gateway, run_dir)
        print(
            f"{variant.value}: {summary.n_success} succeeded, {summary.n_failed} failed"
        )
        all_scored.extend(_score_run(vcfg, evaluator, run_dir, ds.by_id()))

    rows = make_score_table(all_scored, ABLATION_VARIANTS, cfg.score_scale)
    _reports().emit_scores_report(rows, out_dir)
    for row in rows:
        delta = "---" if row.delta_vs_base is None else f"{row.delta_vs_base:+.2f}%"
        print(f"{row.variant.value:<24} avg {row.avg:6.2f}  delta {delta}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out_dir = Path(args.out)
    scored: list[ScoredResult] = []
    verdict_rows: list[dict] = []
    difficulty_rows: list[dict] = []
    for run in args.runs:
        run_dir = Path(run)
        if (run_dir / "scores.jsonl").exists():
            scored += [ScoredResult.from_dict(r) for r in read_jsonl(run_dir / "scores.jsonl")]
        if (run_dir / "verdicts.jsonl").exists():
            verdict_rows += read_jsonl(run_dir / "verdicts.jsonl")
        if (run_dir / "difficulty.jsonl").exists():
            difficulty_rows += read_jsonl(run_dir / "difficulty.jsonl")

    emitted = []
    if scored:
        present = [v for v in REPORT_VARIANT_ORDER if any(s.variant is v for s in scored)]
        emitted.append(_reports().emit_scores_report(
            make_score_table(scored, present, cfg.score_scale), out_dir
        ))
        if len(scored) >= 2:
            emitted.append(_reports().emit_correlation_report(
                correlation_matrix(scored, cfg.correlation_method), out_dir
            ))
    if verdict_rows:
        labels = {(r["variant_a"], r["variant_b"]) for r in verdict_rows}
        if len(labels) > 1:
            raise CliError(f"verdicts mix different variant pairs: {sorted(labels)}")
        pairs = [
            (PairVerdict.from_dict(r["verdicts"][0]), PairVerdict.from_dict(r["verdicts"][1]))
            for r in verdict_rows
        ]
        emitted.append(_reports().emit_winrate_report(
            pairwise_win_rate(pairs, target="a"),
            verdict_rows[0]["variant_a"],
            verdict_rows[0]["variant_b"],
            out_dir,
        ))
    if difficulty_rows:
        if not args.dataset:
            raise CliError("--dataset is required to group difficulty scores")
        ds = load_dataset(args.dataset)
        scores = [DifficultyScore.from_dict(r) for r in difficulty_rows]
        emitted.append(_reports().emit_difficulty_report(
            difficulty_means(scores, list(ds.questions)), out_dir
        ))
    if not emitted:
        raise CliError("no scores.jsonl, verdicts.jsonl, or difficulty.jsonl found in runs")
    for path in emitted:
        print(f"wrote {path}")
    return 0


def cmd_assess_difficulty(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    ds = load_dataset(args.dataset)
    evaluator = JudgeEvaluator(cfg, build_gateway(cfg, judge=True))
    questions = list(ds.questions)

    workers = min(cfg.max_parallel_questions, max(len(questions), 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        scores = list(pool.map(evaluator.assess_difficulty, questions))

    out_dir = Path(args.out)
    write_jsonl(out_dir / "difficulty.jsonl", (s.to_dict() for s in scores))
    rows = difficulty_means(scores, questions)
    _reports().emit_difficulty_report(rows, out_dir)
    for row in rows:
        if row["group_by"] == "level":
            print(f"level {row['group']}: mean difficulty {row['mean_difficulty']:.2f}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--mock", action="store_true", help="use the deterministic mock backend")
    parser.add_argument("--seed", type=int, help="seed for the mock backend")
    parser.add_argument("--cache-dir", type=Path)
    parser.add_argument("--corpus-dir", type=Path, help="local fixture corpus of <concept>.txt files")
    parser.add_argument("--top-k", type=int)
    parser.add_argument("--chunk-size", type=int)
    parser.add_argument("--chunk-overlap", type=int)
    parser.add_argument("--max-parallel", type=int)
    parser.add_argument("--generator-model")
    parser.add_argument("--judge-model")
    parser.add_argument("--embedding-model")
    parser.add_argument("--score-scale", choices=["x20", "affine"])
    parser.add_argument("--correlation-method", choices=["pearson", "spearman"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conquer",
        description="Concept-grounded quiz generation and evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-dataset", help="generate a student-question dataset")
    _add_common(gen)
    gen.add_argument("--areas", help="comma-separated subset of the configured areas")
    gen.add_argument("--levels", help="comma-separated subset of levels")
    gen.add_argument("--n-per-cell", type=int, default=5)
    gen.add_argument("--out", type=Path, default=Path("dataset.jsonl"))
    gen.set_defaults(func=cmd_gen_dataset)

    run = sub.add_parser("run", help="run the pipeline over a dataset")
    _add_common(run)
    run.add_argument("--dataset", type=Path, required=True)
    run.add_argument("--variant", choices=[v.value for v in Variant])
    run.add_argument("--out", type=Path, help="run directory (default runs/<run-id>)")
    run.set_defaults(func=cmd_run)

    score = sub.add_parser("score", help="judge-score the quiz sets of a run")
    _add_common(score)
    score.add_argument("--run", type=Path, required=True)
    score.add_argument("--dataset", type=Path, required=True)
    score.set_defaults(func=cmd_score)

    compare = sub.add_parser("compare", help="order-debiased pairwise comparison of two runs")
    _add_common(compare)
    compare.add_argument("--run-a", type=Path, required=True)
    compare.add_argument("--run-b", type=Path, required=True)
    compare.add_argument("--dataset", type=Path, required=True)
    compare.add_argument("--out", type=Path, default=Path("reports"))
    compare.set_defaults(func=cmd_compare)

    ablation = sub.add_parser("ablation", help="run and score all ablation variants")
    _add_common(ablation)
    ablation.add_argument("--dataset", type=Path, required=True)
    ablation.add_argument("--out", type=Path, default=Path("reports"))
    ablation.set_defaults(func=cmd_ablation)

    report = sub.add_parser("report", help="emit report tables and figures from run artifacts")
    _add_common(report)
    report.add_argument("runs", nargs="+", help="run directories to aggregate")
    report.add_argument("--dataset", type=Path)
    report.add_argument("--out", type=Path, default=Path("reports"))
    report.set_defaults(func=cmd_report)

    difficulty = sub.add_parser("assess-difficulty", help="judge the difficulty of each question")
    _add_common(difficulty)
    difficulty.add_argument("--dataset", type=Path, required=True)
    difficulty.add_argument("--out", type=Path, default=Path("reports"))
    difficulty.set_defaults(func=cmd_assess_difficulty)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, KnowledgeError, GatewayError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # hard, unexpected failure
        logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
