"""Report emission: delimited tables with a rendered figure alongside each.

Numbers print with 2 decimals, correlations with 4; a missing delta prints
as ``---`` and a no-variance correlation as ``nan``.
"""

from __future__ import annotations

import csv
from pathlib import Path

from . import figures
from .domain import DIMENSIONS
from .evaluation import CorrelationMatrix, ReportRow, WinRateRow


def _writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def emit_scores_report(rows: list[ReportRow], out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    csv_path = out_dir / "report_scores.csv"
    with _writer(csv_path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *DIMENSIONS, "avg", "delta_vs_base"])
        for row in rows:
            delta = "---" if row.delta_vs_base is None else f"{row.delta_vs_base:.2f}"
            writer.writerow(
                [
                    row.variant.value,
                    *[f"{row.dimension_means[d]:.2f}" for d in DIMENSIONS],
                    f"{row.avg:.2f}",
                    delta,
                ]
            )
    figures.scores_figure(rows, out_dir / "report_scores.png")
    return csv_path


def emit_winrate_report(
    row: WinRateRow, variant_a: str, variant_b: str, out_dir: Path | str
) -> Path:
    out_dir = Path(out_dir)
    csv_path = out_dir / "report_winrate.csv"
    with _writer(csv_path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant_a", "variant_b", *DIMENSIONS, "overall", "n_questions"])
        writer.writerow(
            [
                variant_a,
                variant_b,
                *[f"{float(row.dimension_rates[d]):.2f}" for d in DIMENSIONS],
                f"{float(row.overall):.2f}",
                row.n_questions,
            ]
        )
    figures.winrate_figure(row, variant_a, variant_b, out_dir / "report_winrate.png")
    return csv_path


def emit_correlation_report(matrix: CorrelationMatrix, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    csv_path = out_dir / "report_correlation.csv"
    with _writer(csv_path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["dimension", *matrix.dimensions])
        for name, row in zip(matrix.dimensions, matrix.values):
            writer.writerow([name, *[f"{value:.4f}" for value in row]])
    figures.correlation_figure(matrix, out_dir / "report_correlation.png")
    return csv_path


def emit_difficulty_report(rows: list[dict], out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    csv_path = out_dir / "report_difficulty.csv"
    with _writer(csv_path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_by", "group", "mean_difficulty", "n_questions"])
        for row in rows:
            writer.writerow(
                [
                    row["group_by"],
                    row["group"],
                    f"{row['mean_difficulty']:.2f}",
                    row["n_questions"],
                ]
            )
    figures.difficulty_figure(rows, out_dir / "report_difficulty.png")
    return csv_path
