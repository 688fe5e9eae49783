"""Matplotlib figures for evaluation reports, rendered to files."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import PoseError, StageSummary

STAGE_COLORS = {"init": "#888888", "no_optim": "#4477aa", "final": "#cc3311"}


def _stage_color(stage: str) -> str:
    return STAGE_COLORS.get(stage, "#228833")


def _cumulative_panel(ax, stage_errors, selector, unit):
    for stage, errors in stage_errors.items():
        values = np.sort([max(selector(e), 1e-12) for e in errors])
        fraction = np.arange(1, len(values) + 1) / len(values)
        ax.step(values, fraction, where="post", label=stage,
                color=_stage_color(stage))
    ax.set_xscale("log")
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel(f"error ({unit})")
    ax.set_ylabel("fraction of queries")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()


def figure_pose_errors(path, stage_errors: Dict[str, List[PoseError]]) -> None:
    """Cumulative error curves, translation and rotation side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6))
    _cumulative_panel(axes[0], stage_errors, lambda e: e.translation_cm, "cm")
    axes[0].set_title("translation error")
    _cumulative_panel(axes[1], stage_errors, lambda e: e.rotation_deg, "deg")
    axes[1].set_title("rotation error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_recall(path, summaries: Sequence[StageSummary]) -> None:
    """Grouped bars: recall per stage at each threshold pair."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    if summaries:
        labels = [t.label for t, _ in summaries[0].recalls]
        x = np.arange(len(labels))
        width = 0.8 / max(len(summaries), 1)
        for k, summary in enumerate(summaries):
            values = [value for _, value in summary.recalls]
            ax.bar(x + k * width, values, width, label=summary.stage,
                   color=_stage_color(summary.stage))
        ax.set_xticks(x + width * (len(summaries) - 1) / 2.0)
        ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("recall")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_figures(
    out_dir,
    stage_errors: Dict[str, List[PoseError]],
    summaries: Sequence[StageSummary],
) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "figure_pose_errors": out_dir / "pose_errors.png",
        "figure_recall": out_dir / "recall.png",
    }
    figure_pose_errors(paths["figure_pose_errors"], stage_errors)
    figure_recall(paths["figure_recall"], summaries)
    return paths
