"""Matplotlib renderings of the report tables.

Every figure mirrors one CSV emitted by `conquer.reports`; rendering is
headless (Agg) and byte-deterministic for identical inputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .domain import DIMENSIONS
from .evaluation import CorrelationMatrix, ReportRow, WinRateRow

_DIMENSION_SHORT = {
    "educational_value": "EV",
    "diversity": "Div",
    "area_relevance": "AR",
    "difficulty_appropriateness": "DA",
    "comprehensiveness": "Comp",
}


def _save(fig, path: Path | str) -> None:
    fig.savefig(Path(path), format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)


def scores_figure(rows: list[ReportRow], path: Path | str) -> None:
    """Grouped bars: normalized dimension means (plus average) per variant."""
    labels = [_DIMENSION_SHORT[d] for d in DIMENSIONS] + ["Avg"]
    x = np.arange(len(labels))
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for i, row in enumerate(rows):
        heights = [row.dimension_means[d] for d in DIMENSIONS] + [row.avg]
        ax.bar(x + i * width, heights, width, label=row.variant.value)
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 100)
    ax.set_ylabel("normalized score")
    ax.set_title("Evaluation scores by dimension")
    ax.legend(fontsize=8)
    _save(fig, path)


def winrate_figure(row: WinRateRow, variant_a: str, variant_b: str, path: Path | str) -> None:
    """Bars of per-dimension win rates, with the 50% break-even line."""
    labels = [_DIMENSION_SHORT[d] for d in DIMENSIONS] + ["Overall"]
    heights = [float(row.dimension_rates[d]) for d in DIMENSIONS] + [float(row.overall)]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(labels, heights, color="tab:blue")
    ax.axhline(50.0, color="gray", linestyle="--", linewidth=1)
    ax.set_ylim(0, 100)
    ax.set_ylabel("win rate (%)")
    ax.set_title(f"Pairwise win rate: {variant_a} vs {variant_b} (n={row.n_questions})")
    _save(fig, path)


def correlation_figure(matrix: CorrelationMatrix, path: Path | str) -> None:
    """Heatmap of dimension score correlations; no-variance cells are gray."""
    data = np.ma.masked_invalid(np.array(matrix.values))
    cmap = plt.get_cmap("coolwarm").copy()
    cmap.set_bad(color="lightgray")
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(data, cmap=cmap, vmin=-1.0, vmax=1.0)
    ticks = [_DIMENSION_SHORT[d] for d in matrix.dimensions]
    ax.set_xticks(range(len(ticks)))
    ax.set_xticklabels(ticks)
    ax.set_yticks(range(len(ticks)))
    ax.set_yticklabels(ticks)
    for i in range(len(ticks)):
        for j in range(len(ticks)):
            value = matrix.values[i][j]
            if value == value:  # skip NaN cells
                ax.text(j, i, f"{value:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(image, ax=ax, shrink=0.85)
    ax.set_title(f"Dimension score correlation ({matrix.method})")
    _save(fig, path)


def difficulty_figure(rows: list[dict], path: Path | str) -> None:
    """Two panels: mean question difficulty by area and by level."""
    by_area = [r for r in rows if r["group_by"] == "area"]
    by_level = [r for r in rows if r["group_by"] == "level"]
    level_order = {"primary_school": 0, "high_school": 1, "phd": 2}
    by_level.sort(key=lambda r: level_order.get(r["group"], 99))
    fig, (ax_area, ax_level) = plt.subplots(
        1, 2, figsize=(12, 4.5), gridspec_kw={"width_ratios": [3, 1]}
    )
    ax_area.bar([r["group"] for r in by_area], [r["mean_difficulty"] for r in by_area])
    ax_area.set_ylim(0, 5)
    ax_area.set_ylabel("mean difficulty")
    ax_area.set_title("Question difficulty by area")
    ax_area.tick_params(axis="x", rotation=90, labelsize=7)
    ax_level.bar(
        [r["group"] for r in by_level],
        [r["mean_difficulty"] for r in by_level],
        color="tab:orange",
    )
    ax_level.set_ylim(0, 5)
    ax_level.set_title("By level")
    ax_level.tick_params(axis="x", rotation=30, labelsize=8)
    _save(fig, path)
