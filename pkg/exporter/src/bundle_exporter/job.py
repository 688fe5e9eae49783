"""Export job description and camera metadata loading.

A job file is JSON:

    {
      "images": ["query.png", "ref_a.png", ...],
      "cameras": "cameras.json",
      "models": {
        "reconstruction": "tinyrecon-v1",
        "features": "gridpatch-v1",
        "retrieval": "cosine-mean-v1"
      },
      "output": "bundle_dir"
    }

The first image is the query; the rest are references in job order.
Relative paths resolve against the job file's directory.

The camera file maps each image path (as written in the job) to its
intrinsics and an optional pose. Poses are 12 row-major numbers [R | t]
in the world-to-camera convention (x_cam = R @ x_world + t), the native
form of the upstream datasets; conversion to the bundle's camera-to-world
convention happens once, at export time. Every reference must carry a
pose; the query pose may be null.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import JobError

CAMERA_CONVENTION = "world-to-camera"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the image size they were calibrated for."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class CameraRecord:
    """Intrinsics and optional world-to-camera pose of one image."""

    intrinsics: CameraIntrinsics
    rotation_w2c: Optional[np.ndarray]
    translation_w2c: Optional[np.ndarray]


@dataclass(frozen=True)
class ExportJob:
    """Everything one export run needs; image index 0 is the query."""

    images: Tuple[str, ...]
    camera_file: str
    reconstruction_model: str
    feature_model: str
    retrieval_model: str
    output: str

    @property
    def query_image(self) -> str:
        return self.images[0]

    @property
    def reference_images(self) -> Tuple[str, ...]:
        return self.images[1:]


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise JobError(f"no such file: {path}")
    except OSError as exc:
        raise JobError(f"{path}: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise JobError(f"{path}: invalid JSON ({exc})")
    if not isinstance(data, dict):
        raise JobError(f"{path}: expected a JSON object")
    return data


def load_job(path) -> ExportJob:
    """Parse and structurally validate a job file."""
    job_path = Path(path)
    data = _read_json(job_path)
    base = job_path.parent

    try:
        images = [str(p) for p in data["images"]]
        cameras = str(data["cameras"])
        models = dict(data["models"])
        output = str(data["output"])
    except (KeyError, TypeError) as exc:
        raise JobError(f"{job_path}: missing or malformed field ({exc})")
    for key in ("reconstruction", "features", "retrieval"):
        if key not in models or not isinstance(models[key], str):
            raise JobError(f"{job_path}: models must name '{key}'")
    if len(images) < 2:
        raise JobError("a job needs the query plus at least one reference image")
    if len(set(images)) != len(images):
        raise JobError("duplicate image paths in job")

    return ExportJob(
        images=tuple(str(base / p) for p in images),
        camera_file=str(base / cameras),
        reconstruction_model=models["reconstruction"],
        feature_model=models["features"],
        retrieval_model=models["retrieval"],
        output=str(base / output),
    )


def _parse_intrinsics(obj: dict, label: str) -> CameraIntrinsics:
    try:
        intr = CameraIntrinsics(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise JobError(f"{label}: bad intrinsics ({exc})")
    if intr.fx <= 0 or intr.fy <= 0 or intr.width < 1 or intr.height < 1:
        raise JobError(f"{label}: intrinsics out of range")
    return intr


def _parse_pose(raw, label: str):
    if raw is None:
        return None, None
    pose = np.asarray(raw, dtype=np.float64)
    if pose.shape != (12,):
        raise JobError(f"{label}: pose needs 12 numbers, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise JobError(f"{label}: non-finite pose")
    m = pose.reshape(3, 4)
    return m[:, :3].copy(), m[:, 3].copy()


def load_cameras(job: ExportJob) -> Dict[str, CameraRecord]:
    """Load camera records for every job image, enforcing pose coverage.

    A reference without a pose is rejected here so the failure happens
    before any model runs or any output is written.
    """
    path = Path(job.camera_file)
    data = _read_json(path)
    if data.get("convention") != CAMERA_CONVENTION:
        raise JobError(
            f"{path}: convention must be '{CAMERA_CONVENTION}', "
            f"got {data.get('convention')!r}")
    try:
        entries = dict(data["cameras"])
    except (KeyError, TypeError) as exc:
        raise JobError(f"{path}: missing cameras table ({exc})")

    base = path.parent
    by_path = {str(base / key): value for key, value in entries.items()}
    records: Dict[str, CameraRecord] = {}
    for image in job.images:
        entry = by_path.get(image)
        if entry is None:
            raise JobError(f"{path}: no camera entry for {image}")
        intr = _parse_intrinsics(entry.get("intrinsics", {}), image)
        rotation, translation = _parse_pose(entry.get("pose"), image)
        records[image] = CameraRecord(
            intrinsics=intr, rotation_w2c=rotation, translation_w2c=translation)

    for image in job.reference_images:
        if records[image].rotation_w2c is None:
            raise JobError(f"reference {image} has no ground-truth pose")
    return records
