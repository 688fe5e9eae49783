"""Metric scale recovery and query pose initialization.

Two complementary estimators recover the scale factor between the
predictions' local frame and the metric GT frame:

  * Stage 1 triangulates matched keypoints across reference pairs with
    usable baselines, using GT poses, and takes the median ratio of
    triangulated (metric) depth to predicted (local) depth.
  * Stage 2 runs a RANSAC over camera-center pairs: each candidate scale
    is the ratio of GT to predicted center distance; a candidate is
    scored by how many cameras land within an inlier radius after
    applying scale, alignment rotation, and the translation implied by
    the sampled pair.

Stage 1 is adopted outright when its trajectory deviation is at most a
threshold; otherwise Stage 2 runs and the stage with the smaller
deviation wins (ties prefer Stage 1). Trajectory deviation compares the
RMS spread of predicted centers, multiplied by the candidate scale,
against the spread of GT centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bundle import SceneBundle
from .errors import (
    AllCandidatesDegenerate,
    DegenerateRadius,
    EmptyInput,
    EmptySamples,
    NoScaleAvailable,
    NoValidPairs,
    PipelineError,
    TooFewCameras,
)
from .geometry import (
    RigidPose,
    bilinear_sample,
    orthonormalize,
    triangulate_pair,
)

STAGE_TRI = "stage1"
STAGE_TRAJ = "stage2"

LOCAL_DEPTH_EPS = 1e-6
LOCAL_DIST_EPS = 1e-9
RADIUS_EPS = 1e-9


@dataclass(frozen=True)
class TrajectoryStats:
    """Centroid and RMS radius of a set of camera centers."""

    centroid: np.ndarray
    radius: float


@dataclass(frozen=True)
class DepthRatioSample:
    """One triangulated depth paired with the predicted local depth."""

    gt_depth: float
    local_depth: float
    view_index: int
    pixel: Tuple[float, float]


@dataclass(frozen=True)
class Stage2Result:
    """Winning RANSAC candidate for the trajectory-based scale."""

    scale: float
    translation: np.ndarray
    inlier_indices: Tuple[int, ...]
    inlier_count: int
    mean_inlier_error: float


@dataclass(frozen=True)
class ScaleEstimate:
    """Chosen scale with the evidence both stages produced.

    ``translation_offset`` maps scaled, rotated local centers onto GT
    centers (gt ~ scale * r_align @ local + offset). ``stage2_inliers``
    holds positions into the camera list handed to Stage 2, or None when
    Stage 2 never ran.
    """

    scale: float
    r_align: np.ndarray
    stage_used: str
    d_tri: Optional[float]
    d_traj: Optional[float]
    translation_offset: np.ndarray
    stage2_inliers: Optional[Tuple[int, ...]] = None


def select_confidence_anchor(
    confidence_maps: Sequence[np.ndarray], view_indices: Sequence[int]
) -> int:
    """View index whose confidence map has the largest total score.

    Ties resolve to the earliest index in ``view_indices``.
    """
    if len(view_indices) == 0:
        raise EmptyInput("no views to select an anchor from")
    totals = [float(np.sum(confidence_maps[v], dtype=np.float64)) for v in view_indices]
    return int(view_indices[int(np.argmax(totals))])


def sample_baseline_pairs(
    centers: Sequence[np.ndarray],
    low: float = 0.3,
    high: float = 10.0,
) -> List[Tuple[int, int]]:
    """All index pairs (i < j) whose center distance lies in [low, high]."""
    pairs = []
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            d = float(np.linalg.norm(np.asarray(centers[i]) - np.asarray(centers[j])))
            if low <= d <= high:
                pairs.append((i, j))
    if not pairs:
        raise NoValidPairs(f"no center pair within [{low}, {high}] m")
    return pairs


def collect_depth_ratio_samples(
    bundle: SceneBundle,
    view_pairs: Sequence[Tuple[int, int]],
    confidence_floor: float = 0.0,
    max_reproj_px: float = 4.0,
) -> List[DepthRatioSample]:
    """Triangulate matches over the given view pairs and pair each
    metric depth with the predicted local depth at the first view.

    For a pair (i, j) with i < j, matched keypoints are triangulated
    with the GT poses; the resulting point's depth in camera i is
    paired with the z component of view i's local point map, sampled
    bilinearly at the keypoint. Samples with local depth <= 1e-6 or
    confidence below the floor are dropped, as are triangulations that
    fail cheirality or reprojection checks.
    """
    samples: List[DepthRatioSample] = []
    for i, j in view_pairs:
        key = (i, j) if i < j else (j, i)
        mset = bundle.matches.get(key)
        if mset is None or mset.pairs.shape[0] == 0:
            continue
        a, b = key
        pose_a, pose_b = bundle.views[a].gt_pose, bundle.views[b].gt_pose
        intr_a, intr_b = bundle.views[a].intrinsics, bundle.views[b].intrinsics
        kp_a = bundle.features[a].keypoints
        kp_b = bundle.features[b].keypoints
        pm_a = bundle.predictions.point_maps[a]
        conf_a = bundle.predictions.confidence[a]
        for ia, ib in mset.pairs:
            pixel_a = kp_a[int(ia)].astype(np.float64)
            pixel_b = kp_b[int(ib)].astype(np.float64)
            try:
                x = triangulate_pair(
                    pose_a, intr_a, pixel_a, pose_b, intr_b, pixel_b,
                    max_reproj_px=max_reproj_px,
                )
            except PipelineError:
                continue
            gt_depth = float(pose_a.world_to_camera(x)[2])
            local_depth = float(bilinear_sample(pm_a, pixel_a)[2])
            if local_depth <= LOCAL_DEPTH_EPS:
                continue
            if float(bilinear_sample(conf_a, pixel_a)) < confidence_floor:
                continue
            samples.append(DepthRatioSample(
                gt_depth=gt_depth,
                local_depth=local_depth,
                view_index=a,
                pixel=(float(pixel_a[0]), float(pixel_a[1])),
            ))
    return samples


def stage1_scale(samples: Sequence[DepthRatioSample]) -> float:
    """Median of gt/local depth ratios (mean of middle two when even)."""
    if len(samples) == 0:
        raise EmptySamples("no depth-ratio samples")
    ratios = np.array([s.gt_depth / s.local_depth for s in samples])
    return float(np.median(ratios))


def trajectory_stats(centers: np.ndarray) -> TrajectoryStats:
    """Centroid and RMS distance-to-centroid of camera centers."""
    c = np.asarray(centers, dtype=np.float64)
    centroid = c.mean(axis=0)
    radius = float(np.sqrt(np.mean(np.sum((c - centroid) ** 2, axis=1))))
    return TrajectoryStats(centroid=centroid, radius=radius)


def trajectory_deviation(
    scale: float, local_centers: np.ndarray, gt_centers: np.ndarray
) -> float:
    """|scale * r_local / r_gt - 1| over the two trajectories."""
    local_centers = np.asarray(local_centers, dtype=np.float64)
    gt_centers = np.asarray(gt_centers, dtype=np.float64)
    if len(local_centers) < 2 or len(gt_centers) < 2:
        raise TooFewCameras("trajectory deviation needs at least two cameras")
    r_local = trajectory_stats(local_centers).radius
    r_gt = trajectory_stats(gt_centers).radius
    if r_gt < RADIUS_EPS:
        raise DegenerateRadius("GT trajectory has no spread")
    return float(abs(scale * r_local / r_gt - 1.0))


def rotation_align(local_rotation: np.ndarray, gt_rotation: np.ndarray) -> np.ndarray:
    """Rotation taking local-frame orientations into the GT frame.

    Computed from one anchor view as gt_rotation @ local_rotation^T and
    re-orthonormalized.
    """
    return orthonormalize(np.asarray(gt_rotation) @ np.asarray(local_rotation).T)


def stage2_ransac_scale(
    local_centers: np.ndarray,
    gt_centers: np.ndarray,
    r_align: np.ndarray,
    iterations: int = 500,
    inlier_radius: float = 0.10,
    seed: int | np.random.Generator = 0,
) -> Stage2Result:
    """Trajectory-alignment RANSAC over camera-center pairs.

    Every iteration samples a pair of distinct cameras whose predicted
    centers are separated by at least 1e-9, proposes the scale
    gt_distance / local_distance, and derives the translation that maps
    the sampled pair's scaled centroid onto its GT centroid. Cameras
    within ``inlier_radius`` of their GT center under that similarity
    count as inliers. The candidate with the most inliers wins; ties
    fall to the smaller mean inlier error. The returned translation is
    recomputed from the winning inlier set, which makes it robust to
    grossly corrupted centers.
    """
    local_centers = np.asarray(local_centers, dtype=np.float64)
    gt_centers = np.asarray(gt_centers, dtype=np.float64)
    n = len(local_centers)
    if n < 2 or len(gt_centers) != n:
        raise TooFewCameras("stage 2 needs at least two cameras on both sides")
    rng = np.random.default_rng(seed)

    rotated = local_centers @ np.asarray(r_align, dtype=np.float64).T
    pairs = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if np.linalg.norm(local_centers[i] - local_centers[j]) >= LOCAL_DIST_EPS
    ]
    if not pairs:
        raise AllCandidatesDegenerate("all predicted centers coincide")

    choices = rng.integers(0, len(pairs), size=iterations)
    best: Optional[Tuple[int, float, float, np.ndarray, np.ndarray]] = None
    for k in range(iterations):
        i, j = pairs[int(choices[k])]
        local_d = np.linalg.norm(local_centers[i] - local_centers[j])
        gt_d = np.linalg.norm(gt_centers[i] - gt_centers[j])
        scale = float(gt_d / local_d)
        if not scale > 0:
            continue
        pair_translation = (
            0.5 * (gt_centers[i] + gt_centers[j])
            - scale * 0.5 * (rotated[i] + rotated[j])
        )
        errors = np.linalg.norm(scale * rotated + pair_translation - gt_centers, axis=1)
        inliers = errors <= inlier_radius
        count = int(np.count_nonzero(inliers))
        mean_err = float(errors[inliers].mean()) if count else float(errors.mean())
        if best is None or count > best[0] or (count == best[0] and mean_err < best[1]):
            best = (count, mean_err, scale, pair_translation, inliers)
    if best is None:
        raise AllCandidatesDegenerate("no scorable candidate")

    count, mean_err, scale, translation, inliers = best
    inlier_idx = tuple(int(v) for v in np.flatnonzero(inliers))
    if count:
        translation = gt_centers[inliers].mean(axis=0) - scale * rotated[inliers].mean(axis=0)
        errors = np.linalg.norm(scale * rotated + translation - gt_centers, axis=1)
        mean_err = float(errors[inliers].mean())
    return Stage2Result(
        scale=scale,
        translation=translation,
        inlier_indices=inlier_idx,
        inlier_count=count,
        mean_inlier_error=mean_err,
    )


def choose_scale(
    tri_scale: Optional[float],
    traj_producer: Optional[Callable[[], Stage2Result]],
    local_centers: np.ndarray,
    gt_centers: np.ndarray,
    r_align: np.ndarray,
    threshold: float = 0.05,
) -> ScaleEstimate:
    """Pick between the two scale estimators by trajectory deviation.

    Stage 1 is adopted without invoking ``traj_producer`` when its
    deviation is at most ``threshold``. Otherwise Stage 2 runs and the
    smaller deviation wins, with ties going to Stage 1. A stage whose
    deviation cannot be computed is dropped; with neither stage usable,
    NoScaleAvailable is raised.
    """
    local_centers = np.asarray(local_centers, dtype=np.float64)
    gt_centers = np.asarray(gt_centers, dtype=np.float64)
    r_align = np.asarray(r_align, dtype=np.float64)

    d_tri: Optional[float] = None
    if tri_scale is not None:
        try:
            d_tri = trajectory_deviation(tri_scale, local_centers, gt_centers)
        except PipelineError:
            tri_scale = None

    def offset_for(scale: float) -> np.ndarray:
        rotated = local_centers @ r_align.T
        return gt_centers.mean(axis=0) - scale * rotated.mean(axis=0)

    if tri_scale is not None and d_tri is not None and d_tri <= threshold:
        return ScaleEstimate(
            scale=float(tri_scale), r_align=r_align, stage_used=STAGE_TRI,
            d_tri=d_tri, d_traj=None, translation_offset=offset_for(tri_scale),
        )

    stage2: Optional[Stage2Result] = None
    d_traj: Optional[float] = None
    if traj_producer is not None:
        try:
            stage2 = traj_producer()
            d_traj = trajectory_deviation(stage2.scale, local_centers, gt_centers)
        except PipelineError:
            stage2 = None
            d_traj = None

    if tri_scale is None and stage2 is None:
        raise NoScaleAvailable("neither scale stage produced an estimate")
    if stage2 is None:
        return ScaleEstimate(
            scale=float(tri_scale), r_align=r_align, stage_used=STAGE_TRI,
            d_tri=d_tri, d_traj=None, translation_offset=offset_for(tri_scale),
        )
    if tri_scale is None or (d_tri is not None and d_traj is not None and d_tri > d_traj):
        return ScaleEstimate(
            scale=float(stage2.scale), r_align=r_align, stage_used=STAGE_TRAJ,
            d_tri=d_tri, d_traj=d_traj, translation_offset=stage2.translation,
            stage2_inliers=stage2.inlier_indices,
        )
    return ScaleEstimate(
        scale=float(tri_scale), r_align=r_align, stage_used=STAGE_TRI,
        d_tri=d_tri, d_traj=d_traj, translation_offset=offset_for(tri_scale),
        stage2_inliers=stage2.inlier_indices,
    )


def init_query_pose(
    estimate: ScaleEstimate,
    anchor_local: RigidPose,
    anchor_gt: RigidPose,
    query_local: RigidPose,
) -> RigidPose:
    """Map the predicted query pose into the metric frame via one anchor.

    The rotation is aligned directly; the center is the anchor's GT
    center plus the scaled, rotated local offset from anchor to query.
    """
    r = orthonormalize(estimate.r_align @ query_local.rotation)
    c = anchor_gt.center + estimate.r_align @ (
        estimate.scale * (query_local.center - anchor_local.center)
    )
    return RigidPose(r, c)
