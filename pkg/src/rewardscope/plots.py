"""Figure rendering for run artifacts.

The delimited files are the canonical outputs; these figures are a
convenience layer drawn from the same in-memory rows, written next to
them. Everything renders off-screen (Agg), no display required.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .estimators import RATE_ATE, ScoredRecord
from .synthetic import ReportRow

_DPI = 120


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)


def _hist_pair(ax, a: list[float], b: list[float], label_a: str, label_b: str, title: str):
    bins = 20 if len(a) + len(b) >= 40 else max(5, (len(a) + len(b)) // 2)
    ax.hist(a, bins=bins, alpha=0.55, label=label_a)
    ax.hist(b, bins=bins, alpha=0.55, label=label_b)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel("reward")
    ax.legend(fontsize=8)


def render_evaluate_figures(
    run_dir: Path, records: Sequence[ScoredRecord], estimate_rows: Sequence[dict]
) -> list[str]:
    """Reward distributions and an estimator comparison for one run."""
    made: list[str] = []

    ones = [r for r in records if r.label == 1]
    zeros = [r for r in records if r.label == 0]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    _hist_pair(
        axes[0],
        [r.reward_original for r in ones],
        [r.reward_original for r in zeros],
        "attribute present",
        "attribute absent",
        "original responses",
    )
    # Rewrite-space pools: the two arms the double-rewrite ATE contrasts.
    present = [r.reward_rewrite2 for r in ones] + [r.reward_rewrite for r in zeros]
    absent = [r.reward_rewrite for r in ones] + [r.reward_rewrite2 for r in zeros]
    _hist_pair(
        axes[1], present, absent,
        "attribute present", "attribute absent",
        "rewrite space (matched pairs)",
    )
    fig.tight_layout()
    _save(fig, run_dir / "reward_distributions.png")
    made.append("reward_distributions.png")

    fig, ax = plt.subplots(figsize=(7, 0.6 * len(estimate_rows) + 1.2))
    names = [row["estimand"] for row in estimate_rows]
    points = [row["point"] for row in estimate_rows]
    lo = [row["point"] - row["ci_low"] for row in estimate_rows]
    hi = [row["ci_high"] - row["point"] for row in estimate_rows]
    y = range(len(names))
    ax.errorbar(points, y, xerr=[lo, hi], fmt="o", capsize=3)
    ax.axvline(0.0, color="grey", linewidth=0.8, linestyle="--")
    ax.set_yticks(list(y))
    ax.set_yticklabels(names, fontsize=9)
    ax.invert_yaxis()
    ax.set_xlabel("effect on reward (with CI)")
    ax.set_title("estimator comparison", fontsize=10)
    fig.tight_layout()
    _save(fig, run_dir / "estimator_comparison.png")
    made.append("estimator_comparison.png")
    return made


def _by_estimator(rows: Sequence[ReportRow]) -> dict[str, list[ReportRow]]:
    out: dict[str, list[ReportRow]] = {}
    for r in rows:
        out.setdefault(r.estimator, []).append(r)
    return out


def render_report_figures(
    run_dir: Path, base: str, rows: Sequence[ReportRow]
) -> list[str]:
    """One figure per report: replication spread or level-by-level drift."""
    name = f"{base}.png"
    if base == "unbiasedness":
        _render_replication_spread(run_dir / name, rows)
    else:
        _render_level_drift(run_dir / name, rows)
    return [name]


def _render_replication_spread(path: Path, rows: Sequence[ReportRow]) -> None:
    groups = _by_estimator(rows)
    fig, ax = plt.subplots(figsize=(1.4 * len(groups) + 2, 4))
    names = list(groups)
    data = [[r.point for r in groups[n]] for n in names]
    ax.boxplot(data, tick_labels=names)
    for i, n in enumerate(names, start=1):
        truth = groups[n][0].truth
        ax.plot([i - 0.3, i + 0.3], [truth, truth], color="red", linewidth=1.2)
    ax.set_ylabel("point estimate across replications")
    ax.set_title("replication spread vs truth (red)", fontsize=10)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def _render_level_drift(path: Path, rows: Sequence[ReportRow]) -> None:
    groups = _by_estimator(rows)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name, rs in groups.items():
        rs = sorted(rs, key=lambda r: r.rho)
        xs = [r.rho for r in rs]
        ys = [r.point for r in rs]
        es = [1.96 * r.se for r in rs]
        wide = name in ("naive", RATE_ATE)
        ax.errorbar(
            xs, ys, yerr=es, marker="o", markersize=3 if wide else 2,
            linewidth=1.6 if wide else 0.8, alpha=1.0 if wide else 0.45,
            capsize=2, label=name,
        )
    truth_rows = sorted(
        (r for r in groups.get(RATE_ATE, []) if r.truth == r.truth),
        key=lambda r: r.rho,
    )
    if truth_rows:
        ax.plot(
            [r.rho for r in truth_rows], [r.truth for r in truth_rows],
            linestyle="--", color="black", linewidth=1.0, label="truth",
        )
    ax.set_xlabel("attribute/confounder correlation level")
    ax.set_ylabel("estimated effect")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
