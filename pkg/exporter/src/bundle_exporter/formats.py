"""Scene-bundle wire format writer.

This module is a from-scratch implementation of the bundle directory
layout consumed by the localization CLI. It deliberately shares no code
with the consumer; the format itself is the contract:

    manifest.json            UTF-8 JSON, indent=2, sorted keys
    pred/pointmap_<i>.f32    rank-3  H x W x 3   camera-frame point map
    pred/conf_<i>.f32        rank-2  H x W       confidence map
    feat/kp_<i>.f32          rank-2  N x 2       keypoints (u, v)
    feat/desc_<i>.f32        rank-2  N x D       unit-norm descriptors
    match/<a>_<b>.f32        rank-2  M x 2       index pairs, a < b

Each .f32 blob is: the 4-byte magic, a little-endian uint32 rank, one
little-endian uint32 per dimension, then the row-major float32 payload.

Poses in the manifest are 12 row-major numbers [R | c] in the
camera-to-world convention: x_world = R @ x_cam + c. View 0 is the
query; views 1..K are references. `gt_pose` is null when unknown,
`local_pose` is the reconstruction model's pose estimate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .job import CameraIntrinsics

BLOB_MAGIC = b"L3BL"
MANIFEST_NAME = "manifest.json"
FORMAT_TAG = "scene-bundle/1"


def write_blob(path: Path, array: np.ndarray) -> None:
    """Serialize an array as a float32 blob."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def camera_to_world(rotation_w2c: np.ndarray, translation_w2c: np.ndarray) -> np.ndarray:
    """Convert a world-to-camera [R | t] pose to camera-to-world [R | c].

    With x_cam = R @ x_world + t, the inverse map is
    x_world = R.T @ x_cam - R.T @ t, so the stored rotation is R.T and
    the camera center is -R.T @ t.
    """
    r = np.asarray(rotation_w2c, dtype=np.float64)
    t = np.asarray(translation_w2c, dtype=np.float64)
    out = np.empty((3, 4), dtype=np.float64)
    out[:, :3] = r.T
    out[:, 3] = -r.T @ t
    return out


def flat12(pose_c2w: np.ndarray) -> List[float]:
    """Row-major 12-number serialization of a camera-to-world [R | c]."""
    m = np.asarray(pose_c2w, dtype=np.float64)
    if m.shape != (3, 4):
        raise ValueError(f"pose must be 3x4, got {m.shape}")
    return [float(v) for v in m.reshape(-1)]


@dataclass
class ViewPayload:
    """One view's manifest fields and blob arrays, ready to serialize."""

    image_id: str
    intrinsics: CameraIntrinsics
    gt_pose_c2w: Optional[np.ndarray]  # (3, 4) or None
    local_pose_c2w: np.ndarray         # (3, 4)
    point_map: np.ndarray              # (H, W, 3)
    confidence: np.ndarray             # (H, W)
    keypoints: np.ndarray              # (N, 2)
    descriptors: np.ndarray            # (N, D)


def _intrinsics_to_json(intr: CameraIntrinsics) -> dict:
    return {
        "fx": float(intr.fx), "fy": float(intr.fy),
        "cx": float(intr.cx), "cy": float(intr.cy),
        "width": int(intr.width), "height": int(intr.height),
    }


def write_bundle_dir(
    out: Path,
    views: Sequence[ViewPayload],
    retrieval: Sequence[int],
    matches: Dict[Tuple[int, int], np.ndarray],
) -> None:
    """Write a complete bundle directory; the caller validates content."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_TAG,
        "views": [
            {
                "image_id": v.image_id,
                "intrinsics": _intrinsics_to_json(v.intrinsics),
                "gt_pose": flat12(v.gt_pose_c2w) if v.gt_pose_c2w is not None else None,
                "local_pose": flat12(v.local_pose_c2w),
            }
            for v in views
        ],
        "retrieval": [int(i) for i in retrieval],
        "match_pairs": sorted([int(a), int(b)] for a, b in matches.keys()),
    }
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    for i, v in enumerate(views):
        write_blob(root / "pred" / f"pointmap_{i}.f32", v.point_map)
        write_blob(root / "pred" / f"conf_{i}.f32", v.confidence)
        write_blob(root / "feat" / f"kp_{i}.f32", v.keypoints)
        write_blob(root / "feat" / f"desc_{i}.f32", v.descriptors)
    for (a, b), pairs in matches.items():
        write_blob(root / "match" / f"{a}_{b}.f32", np.asarray(pairs, dtype=np.float64))
