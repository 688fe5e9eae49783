"""End-to-end bundle export.

Pipeline: load the three models, load camera metadata, load images,
run reconstruction and feature extraction per view, match all view
pairs, rank references, then check every bundle-format invariant and
only after that touch the output directory. A failed contract check
therefore never leaves a partial bundle behind.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from .errors import ContractViolation, JobError
from .formats import ViewPayload, camera_to_world, write_bundle_dir
from .job import ExportJob, load_cameras
from .models import (
    load_feature_model,
    load_reconstruction_model,
    load_retrieval_model,
    mutual_nearest_matches,
)

POSE_ORTHONORMALITY_TOL = 1e-9


def _load_grayscale(path: str) -> np.ndarray:
    """Read an image as float32 grayscale in [0, 1]."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            return np.asarray(gray, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise JobError(f"no such image: {path}")
    except OSError as exc:
        raise JobError(f"cannot read image {path}: {exc}")


def _check_rotation(r: np.ndarray, label: str) -> None:
    if np.max(np.abs(r.T @ r - np.eye(3))) > POSE_ORTHONORMALITY_TOL:
        raise ContractViolation(f"{label}: rotation is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ContractViolation(f"{label}: rotation is a reflection")


def _enforce_contract(
    views: List[ViewPayload],
    retrieval: List[int],
    matches: Dict[Tuple[int, int], np.ndarray],
) -> None:
    """Verify everything the bundle reader will check, before writing."""
    if len(views) < 2:
        raise ContractViolation("a bundle needs the query plus at least one reference")
    for i, v in enumerate(views):
        w, h = v.intrinsics.width, v.intrinsics.height
        if v.point_map.shape != (h, w, 3):
            raise ContractViolation(f"view {i}: point map {v.point_map.shape} != {(h, w, 3)}")
        if v.confidence.shape != (h, w):
            raise ContractViolation(f"view {i}: confidence {v.confidence.shape} != {(h, w)}")
        if not np.all(np.isfinite(v.point_map)) or not np.all(np.isfinite(v.confidence)):
            raise ContractViolation(f"view {i}: non-finite prediction")
        if np.min(v.confidence) < 0:
            raise ContractViolation(f"view {i}: negative confidence")
        kp, desc = v.keypoints, v.descriptors
        if kp.ndim != 2 or kp.shape[1] != 2 or desc.ndim != 2 or desc.shape[0] != kp.shape[0]:
            raise ContractViolation(f"view {i}: feature shapes {kp.shape} / {desc.shape}")
        if not np.all(np.isfinite(kp)) or not np.all(np.isfinite(desc)):
            raise ContractViolation(f"view {i}: non-finite features")
        if kp.shape[0]:
            inside = (
                (kp[:, 0] >= 0.0) & (kp[:, 0] <= w - 1.0)
                & (kp[:, 1] >= 0.0) & (kp[:, 1] <= h - 1.0)
            )
            if not np.all(inside):
                raise ContractViolation(f"view {i}: keypoint outside image bounds")
            norms = np.linalg.norm(desc.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-4:
                raise ContractViolation(f"view {i}: descriptors are not unit-norm")
        _check_rotation(v.local_pose_c2w[:, :3], f"view {i} local pose")
        if i > 0 and v.gt_pose_c2w is None:
            raise ContractViolation(f"reference view {i} has no ground-truth pose")
        if v.gt_pose_c2w is not None:
            _check_rotation(v.gt_pose_c2w[:, :3], f"view {i} gt pose")
    if sorted(retrieval) != list(range(1, len(views))):
        raise ContractViolation("retrieval must be a permutation of reference indices")
    for (a, b), pairs in matches.items():
        if not (0 <= a < b < len(views)):
            raise ContractViolation(f"bad match pair key ({a}, {b})")
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ContractViolation(f"matches ({a}, {b}): shape {pairs.shape}")
        if pairs.shape[0]:
            na = views[a].keypoints.shape[0]
            nb = views[b].keypoints.shape[0]
            if (pairs[:, 0].min() < 0 or pairs[:, 0].max() >= na
                    or pairs[:, 1].min() < 0 or pairs[:, 1].max() >= nb):
                raise ContractViolation(f"matches ({a}, {b}): index out of range")


def export_bundle(job: ExportJob) -> Path:
    """Run the full export and return the bundle directory path."""
    recon = load_reconstruction_model(job.reconstruction_model)
    features = load_feature_model(job.feature_model)
    retrieval_model = load_retrieval_model(job.retrieval_model)
    cameras = load_cameras(job)

    views: List[ViewPayload] = []
    for image_path in job.images:
        record = cameras[image_path]
        intr = record.intrinsics
        image = _load_grayscale(image_path)
        if image.shape != (intr.height, intr.width):
            raise JobError(
                f"{image_path}: image is {image.shape[1]}x{image.shape[0]}, "
                f"camera file says {intr.width}x{intr.height}")

        recon_out = recon.predict(image, intr)
        feat_out = features.extract(image)
        local_pose = camera_to_world(recon_out.rotation_w2c, recon_out.translation_w2c)
        gt_pose = None
        if record.rotation_w2c is not None:
            gt_pose = camera_to_world(record.rotation_w2c, record.translation_w2c)
        views.append(ViewPayload(
            image_id=Path(image_path).name,
            intrinsics=intr,
            gt_pose_c2w=gt_pose,
            local_pose_c2w=local_pose,
            point_map=recon_out.point_map,
            confidence=recon_out.confidence,
            keypoints=feat_out.keypoints,
            descriptors=feat_out.descriptors,
        ))

    matches: Dict[Tuple[int, int], np.ndarray] = {}
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            matches[(a, b)] = mutual_nearest_matches(
                views[a].descriptors, views[b].descriptors)

    ranking = retrieval_model.rank(
        views[0].descriptors, [v.descriptors for v in views[1:]])

    _enforce_contract(views, ranking, matches)
    out = Path(job.output)
    write_bundle_dir(out, views, ranking, matches)
    return out
