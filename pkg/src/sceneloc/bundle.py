"""Scene bundle data model and on-disk format.

A bundle is a directory holding everything the localization pipeline may
read for one query:

    manifest.json            UTF-8; scalars and per-view metadata; poses
                             as 12 row-major numbers [R | c], camera-to-world
    pred/pointmap_<i>.f32    rank-3  H x W x 3   camera-frame point map
    pred/conf_<i>.f32        rank-2  H x W       confidence map
    feat/kp_<i>.f32          rank-2  N x 2       keypoints (u, v)
    feat/desc_<i>.f32        rank-2  N x D       unit-norm descriptors
    match/<i>_<j>.f32        rank-2  M x 2       index pairs, i < j

Each ``.f32`` blob is: magic bytes ``L3BL``, a little-endian uint32 rank,
one little-endian uint32 per dimension, then row-major IEEE-754
little-endian float32 payload. Match indices are stored as floats.

View 0 is the query; views 1..K are references ordered by retrieval
rank. Ground-truth poses are required for references and optional for
the query (used only by evaluation). Match scores, when present in
memory, are not serialized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    IoFailure,
    MissingBlob,
    NoReferencesSurvive,
    ShapeMismatch,
)
from .geometry import Intrinsics, RigidPose

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


def read_blob(path: Path, expect_rank: Optional[int] = None) -> np.ndarray:
    """Load a float32 blob, checking magic, rank, and payload size."""
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingBlob(str(path))
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}")
    if len(raw) < 8 or raw[:4] != BLOB_MAGIC:
        raise BadMagic(str(path))
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1 or rank > 8:
        raise ShapeMismatch(f"{path}: implausible rank {rank}")
    header = 8 + 4 * rank
    if len(raw) < header:
        raise ShapeMismatch(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 0
    if len(raw) != header + 4 * count:
        raise ShapeMismatch(
            f"{path}: payload is {len(raw) - header} bytes, header says {4 * count}"
        )
    if expect_rank is not None and rank != expect_rank:
        raise ShapeMismatch(f"{path}: rank {rank}, expected {expect_rank}")
    data = np.frombuffer(raw, dtype="<f4", offset=header, count=count)
    return data.reshape(shape).copy()


@dataclass
class ViewRecord:
    """Identity, intrinsics, and optional ground-truth pose of one view."""

    image_id: str
    intrinsics: Intrinsics
    gt_pose: Optional[RigidPose]


@dataclass
class PredictionSet:
    """Per-view network outputs: point maps, confidences, local poses.

    Point maps are camera-frame 3-vectors per pixel in the prediction's
    own scale-free coordinate system; confidence maps are non-negative.
    """

    point_maps: List[np.ndarray]
    confidence: List[np.ndarray]
    local_poses: List[RigidPose]


@dataclass
class FeatureSet:
    """Sparse keypoints and unit-norm descriptors of one view."""

    keypoints: np.ndarray
    descriptors: np.ndarray


@dataclass
class MatchSet:
    """Index pairs (into view A and view B keypoints) with optional scores."""

    pairs: np.ndarray
    scores: Optional[np.ndarray] = None


@dataclass
class SceneBundle:
    """Everything the pipeline may read for one query."""

    views: List[ViewRecord]
    retrieval: List[int]
    predictions: PredictionSet
    features: List[FeatureSet]
    matches: Dict[Tuple[int, int], MatchSet] = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def reference_indices(self) -> List[int]:
        return list(range(1, len(self.views)))

    def validate(self) -> None:
        b = len(self.views)
        if b < 2:
            raise InvariantViolation("bundle needs a query and at least one reference")
        if sorted(self.retrieval) != list(range(1, b)):
            raise InvariantViolation("retrieval must be a permutation of reference indices")
        preds = self.predictions
        if not (
            len(preds.point_maps) == b
            and len(preds.confidence) == b
            and len(preds.local_poses) == b
            and len(self.features) == b
        ):
            raise InvariantViolation("per-view lists must cover every view")
        for i, view in enumerate(self.views):
            view.intrinsics.validate()
            w, h = view.intrinsics.width, view.intrinsics.height
            if i > 0 and view.gt_pose is None:
                raise InvariantViolation(f"reference view {i} lacks a GT pose")
            if view.gt_pose is not None:
                view.gt_pose.validate(tol=1e-9)
            preds.local_poses[i].validate(tol=1e-9)
            pm = preds.point_maps[i]
            if pm.shape != (h, w, 3):
                raise ShapeMismatch(f"view {i}: point map {pm.shape}, expected {(h, w, 3)}")
            cf = preds.confidence[i]
            if cf.shape != (h, w):
                raise ShapeMismatch(f"view {i}: confidence {cf.shape}, expected {(h, w)}")
            if not np.all(np.isfinite(pm)):
                raise InvariantViolation(f"view {i}: non-finite point map")
            if not (np.all(np.isfinite(cf)) and np.all(cf >= 0)):
                raise InvariantViolation(f"view {i}: confidence must be finite and >= 0")
            feat = self.features[i]
            kp, desc = feat.keypoints, feat.descriptors
            if kp.ndim != 2 or kp.shape[1] != 2:
                raise ShapeMismatch(f"view {i}: keypoints {kp.shape}")
            if desc.ndim != 2 or desc.shape[0] != kp.shape[0]:
                raise ShapeMismatch(f"view {i}: {desc.shape[0]} descriptors for {kp.shape[0]} keypoints")
            if not np.all(np.isfinite(kp)) or not np.all(np.isfinite(desc)):
                raise InvariantViolation(f"view {i}: non-finite features")
            if kp.shape[0] and not np.all(view.intrinsics.contains(kp)):
                raise InvariantViolation(f"view {i}: keypoint outside image bounds")
            if desc.shape[0]:
                norms = np.linalg.norm(desc.astype(np.float64), axis=1)
                if np.max(np.abs(norms - 1.0)) > 1e-4:
                    raise InvariantViolation(f"view {i}: descriptors are not unit-norm")
        for (a, bidx), mset in self.matches.items():
            if not (0 <= a < b and 0 <= bidx < b and a < bidx):
                raise InvariantViolation(f"bad match pair key ({a}, {bidx})")
            pairs = mset.pairs
            if pairs.ndim != 2 or pairs.shape[1] != 2:
                raise ShapeMismatch(f"matches {(a, bidx)}: {pairs.shape}")
            if pairs.shape[0]:
                na = self.features[a].keypoints.shape[0]
                nb = self.features[bidx].keypoints.shape[0]
                ia, ib = pairs[:, 0], pairs[:, 1]
                if ia.min() < 0 or ia.max() >= na or ib.min() < 0 or ib.max() >= nb:
                    raise InvariantViolation(f"matches {(a, bidx)}: index out of range")


def _intrinsics_to_json(intr: Intrinsics) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
    }


def _intrinsics_from_json(obj: dict) -> Intrinsics:
    try:
        return Intrinsics(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvariantViolation(f"bad intrinsics record: {exc}")


def write_bundle(bundle: SceneBundle, path) -> None:
    """Write a validated bundle to a directory, overwriting blob files."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for i, view in enumerate(bundle.views):
        views.append({
            "image_id": view.image_id,
            "intrinsics": _intrinsics_to_json(view.intrinsics),
            "gt_pose": view.gt_pose.flat12() if view.gt_pose is not None else None,
            "local_pose": bundle.predictions.local_poses[i].flat12(),
        })
    manifest = {
        "format": FORMAT_TAG,
        "views": views,
        "retrieval": [int(v) for v in bundle.retrieval],
        "match_pairs": sorted([int(a), int(b)] for a, b in bundle.matches.keys()),
    }
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    for i in range(bundle.num_views):
        write_blob(root / "pred" / f"pointmap_{i}.f32", bundle.predictions.point_maps[i])
        write_blob(root / "pred" / f"conf_{i}.f32", bundle.predictions.confidence[i])
        write_blob(root / "feat" / f"kp_{i}.f32", bundle.features[i].keypoints)
        write_blob(root / "feat" / f"desc_{i}.f32", bundle.features[i].descriptors)
    for (a, b), mset in bundle.matches.items():
        write_blob(root / "match" / f"{a}_{b}.f32", np.asarray(mset.pairs, dtype=np.float64))


def read_bundle(path) -> SceneBundle:
    """Load and fully validate a bundle directory.

    Stored rotations measurably off the orthonormal manifold are snapped
    to the nearest rotation on ingestion; every structural invariant is
    checked before the bundle is returned.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise IoFailure(f"no {MANIFEST_NAME} in {root}")
    except OSError as exc:
        raise IoFailure(f"{manifest_path}: {exc}")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{manifest_path}: {exc}")
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise InvariantViolation(f"{manifest_path}: unknown or missing format tag")
    try:
        raw_views = list(manifest["views"])
        retrieval = [int(v) for v in manifest["retrieval"]]
        match_pairs = [tuple(int(x) for x in p) for p in manifest["match_pairs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvariantViolation(f"{manifest_path}: {exc}")
    if len(set(match_pairs)) != len(match_pairs):
        raise InvariantViolation("duplicate match pairs in manifest")

    views: List[ViewRecord] = []
    local_poses: List[RigidPose] = []
    for i, rec in enumerate(raw_views):
        try:
            image_id = str(rec["image_id"])
            intr = _intrinsics_from_json(rec["intrinsics"])
            gt_raw = rec["gt_pose"]
            local_raw = rec["local_pose"]
        except (KeyError, TypeError) as exc:
            raise InvariantViolation(f"view {i}: {exc}")
        gt = RigidPose.from_flat12(gt_raw, reorthonormalize=True) if gt_raw is not None else None
        views.append(ViewRecord(image_id=image_id, intrinsics=intr, gt_pose=gt))
        local_poses.append(RigidPose.from_flat12(local_raw, reorthonormalize=True))

    point_maps, confidence, features = [], [], []
    for i, view in enumerate(views):
        w, h = view.intrinsics.width, view.intrinsics.height
        pm = read_blob(root / "pred" / f"pointmap_{i}.f32", expect_rank=3)
        if pm.shape != (h, w, 3):
            raise ShapeMismatch(f"view {i}: point map {pm.shape}, manifest says {(h, w, 3)}")
        cf = read_blob(root / "pred" / f"conf_{i}.f32", expect_rank=2)
        if cf.shape != (h, w):
            raise ShapeMismatch(f"view {i}: confidence {cf.shape}, manifest says {(h, w)}")
        kp = read_blob(root / "feat" / f"kp_{i}.f32", expect_rank=2)
        desc = read_blob(root / "feat" / f"desc_{i}.f32", expect_rank=2)
        point_maps.append(pm)
        confidence.append(cf)
        features.append(FeatureSet(keypoints=kp, descriptors=desc))

    matches: Dict[Tuple[int, int], MatchSet] = {}
    for a, b in match_pairs:
        raw = read_blob(root / "match" / f"{a}_{b}.f32", expect_rank=2)
        if raw.shape[1] != 2:
            raise ShapeMismatch(f"matches ({a}, {b}): {raw.shape}")
        idx = raw.astype(np.int64)
        if raw.size and np.max(np.abs(raw - idx)) > 0:
            raise InvariantViolation(f"matches ({a}, {b}): non-integer indices")
        matches[(a, b)] = MatchSet(pairs=idx)

    bundle = SceneBundle(
        views=views,
        retrieval=retrieval,
        predictions=PredictionSet(point_maps, confidence, local_poses),
        features=features,
        matches=matches,
    )
    bundle.validate()
    return bundle


def filter_references(
    bundle: SceneBundle, k_max: int = 10, min_baseline: float = 0.3
) -> List[int]:
    """Greedy reference selection in retrieval order.

    Walks references by rank, keeping one only if its GT center sits at
    least ``min_baseline`` from every center already kept, stopping after
    ``k_max``. Returns view indices.
    """
    if k_max < 1:
        raise InvariantViolation("k_max must be at least 1")
    if min_baseline < 0:
        raise InvariantViolation("min_baseline must be non-negative")
    kept: List[int] = []
    kept_centers: List[np.ndarray] = []
    for idx in bundle.retrieval:
        pose = bundle.views[idx].gt_pose
        assert pose is not None  # validated on load
        c = pose.center
        if all(np.linalg.norm(c - other) >= min_baseline for other in kept_centers):
            kept.append(idx)
            kept_centers.append(c)
            if len(kept) >= k_max:
                break
    if not kept:
        raise NoReferencesSurvive("reference filtering removed every view")
    return kept
