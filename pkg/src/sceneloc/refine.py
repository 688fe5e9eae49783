"""Structure refinement and query pose solving.

Feature tracks are anchored at one reference view: every match between
the anchor and another reference that shares the anchor keypoint joins
the same track. Track points initialize from the anchor's predicted
depth (scaled to metric) and are then refined one by one against the
fixed GT reference poses with a robust Levenberg-Marquardt loop
(structure-only adjustment).

The query pose is solved by matching query keypoints to track points
projected through the initial pose estimate (guided matching), then
running a P3P RANSAC seeded with the initial pose as the first
hypothesis, and polishing the winner with a 6-DoF Levenberg-Marquardt
refinement over its inliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .bundle import SceneBundle
from .errors import (
    InvariantViolation,
    InvalidDepth,
    SolverDegenerate,
    TooFewCorrespondences,
)
from .geometry import (
    DEPTH_EPS,
    Intrinsics,
    RigidPose,
    backproject,
    bilinear_sample,
    orthonormalize,
    project_depths,
    skew,
    so3_exp,
)


@dataclass
class Track:
    """One anchored feature track with observations in several views."""

    anchor_view: int
    anchor_index: int
    views: List[int]
    pixels: np.ndarray
    descriptor: np.ndarray
    point: Optional[np.ndarray] = None
    converged: bool = False
    initial_cost: Optional[float] = None
    final_cost: Optional[float] = None


@dataclass(frozen=True)
class Correspondence2D3D:
    """A query keypoint matched to a refined track point."""

    point: np.ndarray
    pixel: np.ndarray
    descriptor_distance: float
    query_index: int
    track_index: int


@dataclass(frozen=True)
class BaConfig:
    """Settings for the per-track robust adjustment."""

    robust_scale: float = 1.0
    max_iterations: int = 50
    gradient_tolerance: float = 1e-12
    parameter_tolerance: float = 1e-12


@dataclass(frozen=True)
class PnpResult:
    """Pose solve outcome with its supporting inliers."""

    pose: RigidPose
    inlier_mask: np.ndarray
    inlier_count: int
    refined: bool


def build_tracks(
    bundle: SceneBundle, anchor_view: int, partner_views: Sequence[int]
) -> List[Track]:
    """Group anchor-keypoint matches into tracks.

    Each anchor keypoint matched in at least one partner view becomes a
    track whose first observation is the anchor pixel itself. A second
    match of the same track into a view it already observes keeps the
    higher-scoring row when scores exist and the first row otherwise.
    Tracks come back sorted by anchor keypoint index.
    """
    anchor_kp = bundle.features[anchor_view].keypoints
    anchor_desc = bundle.features[anchor_view].descriptors
    obs: Dict[int, Dict[int, Tuple[np.ndarray, Optional[float]]]] = {}
    for partner in partner_views:
        if partner == anchor_view:
            continue
        key = (min(anchor_view, partner), max(anchor_view, partner))
        mset = bundle.matches.get(key)
        if mset is None:
            continue
        anchor_col = 0 if anchor_view == key[0] else 1
        partner_kp = bundle.features[partner].keypoints
        for row in range(mset.pairs.shape[0]):
            ai = int(mset.pairs[row, anchor_col])
            pi = int(mset.pairs[row, 1 - anchor_col])
            score = None if mset.scores is None else float(mset.scores[row])
            per_view = obs.setdefault(ai, {})
            if partner in per_view:
                old_score = per_view[partner][1]
                if score is None or old_score is None or score <= old_score:
                    continue
            per_view[partner] = (partner_kp[pi].astype(np.float64), score)

    tracks: List[Track] = []
    for ai in sorted(obs):
        per_view = obs[ai]
        views = [anchor_view] + sorted(per_view)
        pixels = np.vstack(
            [anchor_kp[ai].astype(np.float64)]
            + [per_view[v][0] for v in sorted(per_view)]
        )
        tracks.append(Track(
            anchor_view=anchor_view,
            anchor_index=ai,
            views=views,
            pixels=pixels,
            descriptor=anchor_desc[ai].astype(np.float64),
        ))
    return tracks


def init_track_point(track: Track, bundle: SceneBundle, scale: float) -> np.ndarray:
    """Seed the track point from the anchor's predicted depth.

    The local depth at the anchor pixel is sampled bilinearly, brought
    to metric units with ``scale``, and back-projected through the
    anchor's GT pose. Raises InvalidDepth for non-positive depths.
    """
    view = track.anchor_view
    local_point = bilinear_sample(
        bundle.predictions.point_maps[view], track.pixels[0]
    )
    depth = scale * float(local_point[2])
    point = backproject(
        bundle.views[view].gt_pose,
        bundle.views[view].intrinsics,
        track.pixels[0],
        depth,
    )
    track.point = point
    return point


def soft_l1(squared_norm, scale: float = 1.0):
    """Soft-L1 robust cost of a squared residual norm.

    Evaluated as 2*s / (sqrt(1 + s/c^2) + 1), which equals
    2*c^2*(sqrt(1 + s/c^2) - 1) without the cancellation that loses all
    precision for residuals below ~1e-8.
    """
    c2 = scale * scale
    return 2.0 * squared_norm / (np.sqrt(1.0 + squared_norm / c2) + 1.0)


def soft_l1_weight(squared_norm, scale: float = 1.0):
    """First derivative of the soft-L1 cost, used as an IRLS weight."""
    c2 = scale * scale
    return 1.0 / np.sqrt(1.0 + squared_norm / c2)


def _projection_core(pose: RigidPose, intrinsics: Intrinsics, point) -> Tuple[np.ndarray, np.ndarray]:
    """Camera-frame point and the 2x3 image derivative at it."""
    xc = pose.world_to_camera(np.asarray(point, dtype=np.float64))
    z = xc[2]
    dproj = np.array([
        [intrinsics.fx / z, 0.0, -intrinsics.fx * xc[0] / (z * z)],
        [0.0, intrinsics.fy / z, -intrinsics.fy * xc[1] / (z * z)],
    ])
    return xc, dproj


def projection_jacobian_point(pose: RigidPose, intrinsics: Intrinsics, point) -> np.ndarray:
    """2x3 derivative of the projected pixel wrt the world point."""
    xc, dproj = _projection_core(pose, intrinsics, point)
    return dproj @ pose.rotation.T


def projection_jacobian_pose(pose: RigidPose, intrinsics: Intrinsics, point) -> np.ndarray:
    """2x6 derivative of the projected pixel wrt the pose.

    The first three columns differentiate along a right-multiplied
    rotation update R @ exp(w); the last three along a center shift.
    """
    xc, dproj = _projection_core(pose, intrinsics, point)
    return np.hstack([dproj @ skew(xc), dproj @ (-pose.rotation.T)])


def _point_residuals(point, poses, intrinsics_list, pixels):
    """Residuals, camera points, and validity for one track point."""
    residuals = np.zeros((len(poses), 2))
    cam_points = np.zeros((len(poses), 3))
    for k, (pose, intr, pixel) in enumerate(zip(poses, intrinsics_list, pixels)):
        xc = pose.world_to_camera(point)
        cam_points[k] = xc
        if xc[2] <= DEPTH_EPS:
            return None, None
        residuals[k, 0] = intr.fx * xc[0] / xc[2] + intr.cx - pixel[0]
        residuals[k, 1] = intr.fy * xc[1] / xc[2] + intr.cy - pixel[1]
    return residuals, cam_points


def _robust_cost(residuals, scale):
    s = np.sum(residuals * residuals, axis=1)
    return float(np.sum(soft_l1(s, scale)))


def refine_track_point(
    track: Track,
    poses: Sequence[RigidPose],
    intrinsics_list: Sequence[Intrinsics],
    config: BaConfig = BaConfig(),
) -> Track:
    """Robust LM update of one track's 3D point, poses held fixed.

    Steps are accepted only when the robust cost drops, so the final
    cost never exceeds the initial one. A point that starts behind any
    camera is left untouched with ``converged=False``.
    """
    if track.point is None:
        raise InvariantViolation("track point must be initialized before refinement")
    point = np.asarray(track.point, dtype=np.float64).copy()
    residuals, cam_points = _point_residuals(
        point, poses, intrinsics_list, track.pixels)
    if residuals is None:
        track.initial_cost = float("inf")
        track.final_cost = float("inf")
        track.converged = False
        return track
    cost = _robust_cost(residuals, config.robust_scale)
    track.initial_cost = cost

    lam = 1e-3
    converged = False
    for _ in range(config.max_iterations):
        a = np.zeros((3, 3))
        g = np.zeros(3)
        for k, pose in enumerate(poses):
            jac = projection_jacobian_point(pose, intrinsics_list[k], point)
            w = soft_l1_weight(float(residuals[k] @ residuals[k]),
                               config.robust_scale)
            a += w * jac.T @ jac
            g += w * jac.T @ residuals[k]
        if np.max(np.abs(g)) < config.gradient_tolerance:
            converged = True
            break
        stepped = False
        for _ in range(12):
            damped = a + lam * np.diag(np.maximum(np.diag(a), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = point + delta
            trial_res, trial_cam = _point_residuals(
                trial, poses, intrinsics_list, track.pixels)
            if trial_res is not None:
                trial_cost = _robust_cost(trial_res, config.robust_scale)
                if trial_cost < cost:
                    small_step = np.linalg.norm(delta) < (
                        config.parameter_tolerance
                        * (np.linalg.norm(point) + config.parameter_tolerance)
                    )
                    point, residuals, cam_points = trial, trial_res, trial_cam
                    cost = trial_cost
                    lam = max(lam / 10.0, 1e-12)
                    stepped = True
                    if small_step:
                        converged = True
                    break
            lam = min(lam * 10.0, 1e12)
        if not stepped:
            converged = True
        if converged:
            break

    track.point = point
    track.final_cost = cost
    track.converged = bool(converged)
    return track


def structure_only_ba(
    tracks: Sequence[Track],
    bundle: SceneBundle,
    config: BaConfig = BaConfig(),
) -> List[Track]:
    """Refine every track point against the GT reference poses."""
    for track in tracks:
        poses = [bundle.views[v].gt_pose for v in track.views]
        intrinsics_list = [bundle.views[v].intrinsics for v in track.views]
        refine_track_point(track, poses, intrinsics_list, config)
    return list(tracks)


def guided_match(
    keypoints: np.ndarray,
    descriptors: np.ndarray,
    tracks: Sequence[Track],
    pose: RigidPose,
    intrinsics: Intrinsics,
    search_radius: float = 20.0,
    max_descriptor_distance: float = 0.9,
) -> List[Correspondence2D3D]:
    """Match query keypoints to track points near their projections.

    Track points are projected through the pose estimate; points behind
    the camera or outside the image are skipped. Each query keypoint
    considers the tracks whose projections fall within the search
    radius and takes the smallest descriptor distance, accepted up to
    the descriptor threshold. Candidate ties break to the lowest track
    index.
    """
    usable = [i for i, t in enumerate(tracks) if t.point is not None]
    if not usable or len(keypoints) == 0:
        return []
    points = np.vstack([tracks[i].point for i in usable])
    uv, z = project_depths(pose, intrinsics, points)
    visible = (z > DEPTH_EPS) & np.all(np.isfinite(uv), axis=1)
    visible &= np.array([intrinsics.contains(p) for p in uv], dtype=bool)
    keep = np.flatnonzero(visible)
    if keep.size == 0:
        return []
    track_ids = [usable[i] for i in keep]
    tree = cKDTree(uv[keep])
    track_desc = np.vstack([tracks[i].descriptor for i in track_ids])

    out: List[Correspondence2D3D] = []
    kp = np.asarray(keypoints, dtype=np.float64)
    desc = np.asarray(descriptors, dtype=np.float64)
    neighborhoods = tree.query_ball_point(kp, r=search_radius)
    for qi, hood in enumerate(neighborhoods):
        if not hood:
            continue
        best_dist = None
        best_local = None
        for local in sorted(hood):
            d = float(np.linalg.norm(desc[qi] - track_desc[local]))
            if best_dist is None or d < best_dist:
                best_dist = d
                best_local = local
        if best_dist is None or best_dist > max_descriptor_distance:
            continue
        ti = track_ids[best_local]
        out.append(Correspondence2D3D(
            point=np.asarray(tracks[ti].point, dtype=np.float64),
            pixel=kp[qi].copy(),
            descriptor_distance=best_dist,
            query_index=qi,
            track_index=ti,
        ))
    return out


def bearing_vectors(intrinsics: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame rays through the given pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack([
        (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
        (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
        np.ones(len(pixels)),
    ], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _kabsch_pose(world: np.ndarray, camera: np.ndarray) -> RigidPose:
    """Pose whose world-to-camera map best sends world onto camera."""
    wc = world - world.mean(axis=0)
    cc = camera - camera.mean(axis=0)
    h = wc.T @ cc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r_wc = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t_wc = camera.mean(axis=0) - r_wc @ world.mean(axis=0)
    return RigidPose(r_wc.T, -r_wc.T @ t_wc)


def p3p_solve(rays: np.ndarray, points: np.ndarray) -> List[RigidPose]:
    """Minimal three-point pose candidates from bearing vectors.

    Solves the three-ray distance system via its quartic resultant and
    reassembles each admissible depth triple into a pose with an
    orthogonal Procrustes fit. Raises SolverDegenerate for collinear or
    coincident points; returns an empty list when no root survives the
    consistency checks.
    """
    rays = np.asarray(rays, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    a = float(np.linalg.norm(points[1] - points[2]))
    b = float(np.linalg.norm(points[0] - points[2]))
    c = float(np.linalg.norm(points[0] - points[1]))
    span = max(a, b, c)
    if span < 1e-12 or min(a, b, c) < 1e-9 * span:
        raise SolverDegenerate("coincident world points")
    cross = np.cross(points[1] - points[0], points[2] - points[0])
    if np.linalg.norm(cross) < 1e-9 * span * span:
        raise SolverDegenerate("collinear world points")

    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])
    lam = (a * a) / (b * b)
    mu = (c * c) / (b * b)

    a4 = -4.0 * ca * ca * mu + lam * lam - 2.0 * lam * mu - 2.0 * lam \
        + mu * mu + 2.0 * mu + 1.0
    a3 = 4.0 * (2.0 * ca * ca * cb * mu + ca * cg * lam + ca * cg * mu
                - ca * cg - cb * lam * lam + 2.0 * cb * lam * mu + cb * lam
                - cb * mu * mu - cb * mu)
    a2 = -2.0 * (2.0 * ca * ca * mu - 2.0 * ca * ca
                 + 4.0 * ca * cb * cg * lam + 4.0 * ca * cb * cg * mu
                 - 2.0 * cb * cb * lam * lam + 4.0 * cb * cb * lam * mu
                 - 2.0 * cb * cb * mu * mu + 2.0 * cg * cg * lam
                 - 2.0 * cg * cg - lam * lam + 2.0 * lam * mu - mu * mu + 1.0)
    a1 = 4.0 * (ca * cg * lam + ca * cg * mu - ca * cg
                + 2.0 * cb * cg * cg * lam - cb * lam * lam
                + 2.0 * cb * lam * mu - cb * lam - cb * mu * mu + cb * mu)
    a0 = -4.0 * cg * cg * lam + lam * lam - 2.0 * lam * mu + 2.0 * lam \
        + mu * mu - 2.0 * mu + 1.0

    coeffs = np.array([a4, a3, a2, a1, a0])
    if not np.all(np.isfinite(coeffs)) or abs(a4) < 1e-14 * np.max(np.abs(coeffs)):
        return []
    roots = np.roots(coeffs)
    deriv = np.polyder(coeffs)

    candidates: List[RigidPose] = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        for _ in range(3):
            slope = np.polyval(deriv, v)
            if slope == 0.0:
                break
            v -= np.polyval(coeffs, v) / slope
        if v <= 0.0:
            continue
        t = 1.0 + v * v - 2.0 * v * cb
        if t <= 1e-12:
            continue
        disc = cg * cg - (1.0 - mu * t)
        if disc < 0.0:
            if disc > -1e-12:
                disc = 0.0
            else:
                continue
        for sign in (1.0, -1.0):
            u_val = cg + sign * np.sqrt(disc)
            if u_val <= 0.0:
                continue
            residual = u_val * u_val + v * v - 2.0 * u_val * v * ca - lam * t
            if abs(residual) > 1e-4 * max(1.0, abs(lam * t)):
                continue
            s1 = b / np.sqrt(t)
            depths = np.array([s1, u_val * s1, v * s1])
            camera_points = rays * depths[:, None]
            candidates.append(_kabsch_pose(points, camera_points))
    return candidates


def _reprojection_errors(pose, intrinsics, points, pixels):
    uv, z = project_depths(pose, intrinsics, points)
    err = np.linalg.norm(uv - pixels, axis=1)
    err = np.where((z > DEPTH_EPS) & np.isfinite(err), err, np.inf)
    return err


def lm_refine_pose(
    pose: RigidPose,
    points: np.ndarray,
    pixels: np.ndarray,
    intrinsics: Intrinsics,
    max_iterations: int = 50,
    gradient_tolerance: float = 1e-12,
    parameter_tolerance: float = 1e-12,
) -> RigidPose:
    """6-DoF Levenberg-Marquardt pose polish on fixed 2D-3D pairs.

    The rotation moves on the manifold (right-multiplied exponential
    update); the center updates additively. Steps are accepted only
    when the summed squared reprojection error drops.
    """
    points = np.asarray(points, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    rotation = pose.rotation.copy()
    center = pose.center.copy()

    def cost_of(rot, cen):
        p = RigidPose(rot, cen)
        err = _reprojection_errors(p, intrinsics, points, pixels)
        if not np.all(np.isfinite(err)):
            return np.inf
        return float(np.sum(err * err))

    cost = cost_of(rotation, center)
    if not np.isfinite(cost):
        return pose
    lam = 1e-3
    for _ in range(max_iterations):
        a = np.zeros((6, 6))
        g = np.zeros(6)
        pose_now = RigidPose(rotation, center)
        for point, pixel in zip(points, pixels):
            xc = pose_now.world_to_camera(point)
            z = xc[2]
            if z <= DEPTH_EPS:
                return RigidPose(orthonormalize(rotation), center)
            jac = projection_jacobian_pose(pose_now, intrinsics, point)
            r = np.array([
                intrinsics.fx * xc[0] / z + intrinsics.cx - pixel[0],
                intrinsics.fy * xc[1] / z + intrinsics.cy - pixel[1],
            ])
            a += jac.T @ jac
            g += jac.T @ r
        if np.max(np.abs(g)) < gradient_tolerance:
            break
        accepted = False
        for _ in range(12):
            damped = a + lam * np.diag(np.maximum(np.diag(a), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam = min(lam * 10.0, 1e12)
                continue
            trial_rot = rotation @ so3_exp(delta[:3])
            trial_cen = center + delta[3:]
            trial_cost = cost_of(trial_rot, trial_cen)
            if trial_cost < cost:
                small = np.linalg.norm(delta) < parameter_tolerance * (
                    1.0 + np.linalg.norm(center))
                rotation, center, cost = trial_rot, trial_cen, trial_cost
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                if small:
                    return RigidPose(orthonormalize(rotation), center)
                break
            lam = min(lam * 10.0, 1e12)
        if not accepted:
            break
    return RigidPose(orthonormalize(rotation), center)


def pnp_ransac(
    correspondences: Sequence[Correspondence2D3D],
    intrinsics: Intrinsics,
    initial_pose: RigidPose,
    iterations: int = 1000,
    inlier_px: float = 5.0,
    seed: int | np.random.Generator = 0,
    refine: bool = True,
) -> PnpResult:
    """Minimal-solver RANSAC for the query pose with an LM refit.

    The initial pose is scored as the first hypothesis. Each iteration
    samples three correspondences for the minimal solver plus a fourth
    to disambiguate its candidate poses; a hypothesis replaces the
    incumbent only with strictly more inliers, and the loop exits early
    once every correspondence is an inlier. The returned pose is the
    least-squares refit over the winning inlier set, and the returned
    mask is recomputed for that pose. Keeping the refit even when it
    drops marginal support stops a contorted minimal-sample hypothesis
    from winning on raw count; the caller compares against the initial
    pose and falls back when the refit genuinely lost ground.
    """
    n = len(correspondences)
    if n < 4:
        raise TooFewCorrespondences(f"need at least 4 correspondences, got {n}")
    points = np.vstack([c.point for c in correspondences])
    pixels = np.vstack([c.pixel for c in correspondences])
    rng = np.random.default_rng(seed)

    def score(pose):
        err = _reprojection_errors(pose, intrinsics, points, pixels)
        mask = err <= inlier_px
        return mask, int(np.count_nonzero(mask))

    best_pose = initial_pose
    best_mask, best_count = score(initial_pose)
    if best_count < n:
        for _ in range(iterations):
            sample = rng.choice(n, size=4, replace=False)
            tri, probe = sample[:3], int(sample[3])
            try:
                candidates = p3p_solve(
                    bearing_vectors(intrinsics, pixels[tri]), points[tri])
            except SolverDegenerate:
                continue
            chosen = None
            chosen_err = None
            for cand in candidates:
                err = _reprojection_errors(
                    cand, intrinsics, points[probe:probe + 1],
                    pixels[probe:probe + 1])[0]
                if np.isfinite(err) and (chosen_err is None or err < chosen_err):
                    chosen = cand
                    chosen_err = err
            if chosen is None or chosen_err > inlier_px:
                continue
            mask, count = score(chosen)
            if count > best_count:
                best_pose, best_mask, best_count = chosen, mask, count
                if best_count == n:
                    break

    refined = False
    if refine and best_count >= 4:
        best_pose = lm_refine_pose(
            best_pose, points[best_mask], pixels[best_mask], intrinsics)
        best_mask, best_count = score(best_pose)
        refined = True
    return PnpResult(
        pose=best_pose,
        inlier_mask=best_mask,
        inlier_count=best_count,
        refined=refined,
    )


def select_final(
    initial_pose: RigidPose,
    correspondences: Sequence[Correspondence2D3D],
    intrinsics: Intrinsics,
    solved: Optional[PnpResult],
    inlier_px: float = 5.0,
) -> PnpResult:
    """Keep the solved pose only when it explains at least as many
    correspondences as the initial pose.

    With no solve (too few correspondences) the initial pose object is
    returned unchanged and unrefined.
    """
    n = len(correspondences)
    if n:
        points = np.vstack([c.point for c in correspondences])
        pixels = np.vstack([c.pixel for c in correspondences])
        init_err = _reprojection_errors(initial_pose, intrinsics, points, pixels)
        init_mask = init_err <= inlier_px
    else:
        init_mask = np.zeros(0, dtype=bool)
    init_count = int(np.count_nonzero(init_mask))
    if solved is None:
        return PnpResult(pose=initial_pose, inlier_mask=init_mask,
                         inlier_count=init_count, refined=False)
    if init_count > solved.inlier_count:
        return PnpResult(pose=initial_pose, inlier_mask=init_mask,
                         inlier_count=init_count, refined=False)
    return solved
