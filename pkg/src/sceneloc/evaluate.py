"""Pose error metrics, recall summaries, and report writers.

A localization run yields one pose per stage (initialization, solve
without structure refinement, final). Errors are reported as center
distance in centimeters and rotation angle in degrees; recall at a
threshold pair counts queries meeting BOTH components. Medians are
taken per component independently.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import EmptyInput, InputError
from .geometry import RigidPose, rotation_angle

STAGES = ("init", "no_optim", "final")


@dataclass(frozen=True)
class PoseError:
    """Per-query error of one estimated pose against the ground truth."""

    query_id: str
    translation_cm: float
    rotation_deg: float


@dataclass(frozen=True)
class RecallThreshold:
    translation_cm: float
    rotation_deg: float

    @property
    def label(self) -> str:
        def fmt(v: float) -> str:
            return f"{v:g}"
        return f"{fmt(self.translation_cm)}cm/{fmt(self.rotation_deg)}deg"


@dataclass(frozen=True)
class StageSummary:
    stage: str
    num_queries: int
    median_translation_cm: float
    median_rotation_deg: float
    recalls: Tuple[Tuple[RecallThreshold, float], ...]


DEFAULT_THRESHOLDS = (RecallThreshold(5.0, 5.0), RecallThreshold(1.0, 1.0))


def pose_error(estimate: RigidPose, gt: RigidPose, query_id: str) -> PoseError:
    """Center distance (cm) and rotation angle (deg) between two poses."""
    return PoseError(
        query_id=query_id,
        translation_cm=100.0 * float(np.linalg.norm(estimate.center - gt.center)),
        rotation_deg=rotation_angle(estimate.rotation, gt.rotation),
    )


def recall(errors: Sequence[PoseError], threshold: RecallThreshold) -> float:
    """Fraction of queries within both components of the threshold."""
    if len(errors) == 0:
        raise EmptyInput("no pose errors to compute recall over")
    good = sum(
        1 for e in errors
        if e.translation_cm <= threshold.translation_cm
        and e.rotation_deg <= threshold.rotation_deg
    )
    return good / len(errors)


def summarize(
    stage: str,
    errors: Sequence[PoseError],
    thresholds: Sequence[RecallThreshold] = DEFAULT_THRESHOLDS,
) -> StageSummary:
    """Independent component medians plus recall at each threshold."""
    if len(errors) == 0:
        raise EmptyInput("no pose errors to summarize")
    translations = np.array([e.translation_cm for e in errors])
    rotations = np.array([e.rotation_deg for e in errors])
    return StageSummary(
        stage=stage,
        num_queries=len(errors),
        median_translation_cm=float(np.median(translations)),
        median_rotation_deg=float(np.median(rotations)),
        recalls=tuple((t, recall(errors, t)) for t in thresholds),
    )


def parse_thresholds(text: str) -> Tuple[RecallThreshold, ...]:
    """Parse "5:5,1:1" into threshold pairs (cm:deg, comma separated)."""
    out = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 2:
            raise InputError(f"bad threshold component {chunk!r}, want cm:deg")
        try:
            t = float(parts[0])
            r = float(parts[1])
        except ValueError as exc:
            raise InputError(f"non-numeric threshold {chunk!r}") from exc
        if t <= 0 or r <= 0:
            raise InputError(f"thresholds must be positive, got {chunk!r}")
        out.append(RecallThreshold(t, r))
    if not out:
        raise InputError("no thresholds given")
    return tuple(out)


def _summary_json_dict(summaries: Sequence[StageSummary]) -> dict:
    stages = {}
    for s in summaries:
        stages[s.stage] = {
            "median_translation_cm": s.median_translation_cm,
            "median_rotation_deg": s.median_rotation_deg,
            "recall": {t.label: value for t, value in s.recalls},
        }
    return {
        "num_queries": summaries[0].num_queries if summaries else 0,
        "thresholds": [t.label for t, _ in summaries[0].recalls] if summaries else [],
        "stages": stages,
    }


def write_summary_json(path, summaries: Sequence[StageSummary]) -> None:
    Path(path).write_text(
        json.dumps(_summary_json_dict(summaries), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def write_report_text(path, summaries: Sequence[StageSummary]) -> None:
    """Aligned plain-text table, one row per stage."""
    if not summaries:
        raise EmptyInput("nothing to report")
    headers = ["stage", "queries", "med t (cm)", "med r (deg)"]
    headers += [f"recall@{t.label}" for t, _ in summaries[0].recalls]
    rows = []
    for s in summaries:
        row = [s.stage, str(s.num_queries),
               f"{s.median_translation_cm:.4f}",
               f"{s.median_rotation_deg:.4f}"]
        row += [f"{value:.3f}" for _, value in s.recalls]
        rows.append(row)
    widths = [max(len(h), *(len(r[k]) for r in rows))
              for k, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_per_query_csv(path, stage_errors: Dict[str, List[PoseError]]) -> None:
    """One row per query, one error column pair per stage."""
    stages = [s for s in STAGES if s in stage_errors]
    stages += [s for s in sorted(stage_errors) if s not in STAGES]
    by_query: Dict[str, Dict[str, PoseError]] = {}
    for stage in stages:
        for err in stage_errors[stage]:
            by_query.setdefault(err.query_id, {})[stage] = err
    header = ["query_id"]
    for stage in stages:
        header += [f"{stage}_translation_cm", f"{stage}_rotation_deg"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for query_id in sorted(by_query):
            row = [query_id]
            for stage in stages:
                err = by_query[query_id].get(stage)
                row += (["", ""] if err is None
                        else [f"{err.translation_cm:.9g}",
                              f"{err.rotation_deg:.9g}"])
            writer.writerow(row)


def write_report(
    out_dir,
    stage_errors: Dict[str, List[PoseError]],
    thresholds: Sequence[RecallThreshold] = DEFAULT_THRESHOLDS,
) -> Dict[str, Path]:
    """Write the text table, JSON summary, CSV, and figures.

    Returns the paths that were written, keyed by artifact name.
    """
    from .figures import write_figures

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = [s for s in STAGES if s in stage_errors]
    ordered += [s for s in sorted(stage_errors) if s not in STAGES]
    summaries = [summarize(s, stage_errors[s], thresholds) for s in ordered]

    paths = {
        "report": out_dir / "report.txt",
        "summary": out_dir / "summary.json",
        "per_query": out_dir / "per_query.csv",
    }
    write_report_text(paths["report"], summaries)
    write_summary_json(paths["summary"], summaries)
    write_per_query_csv(paths["per_query"], stage_errors)
    paths.update(write_figures(out_dir / "figures", stage_errors, summaries))
    return paths
