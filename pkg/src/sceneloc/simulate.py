"""Synthetic scenes with exactly known geometry for end-to-end checks.

A scene is a ring of reference cameras plus one query camera, all
looking at the origin, above a small stack of tilted planes. World
points are constructed by casting rays through integer pixels of the
reference views, so every point has one view where its observation
falls exactly on a pixel center and the rendered point map holds its
exact camera-frame coordinates.

The generator produces the ground-truth side directly. The predicted
side (local poses and point maps) is derived from it through an exact
similarity transform and then optionally corrupted: coordinate noise,
gross center outliers on reference poses, keypoint and descriptor
noise, and rewired match rows. With all corruption at zero the
predictions are an exact scaled copy of the ground truth, which gives
the tests a closed-form answer for every pipeline stage.

An OracleRecord rides along with the bundle; it stores the query GT
pose, the similarity parameters, the world points, and the mapping
from keypoints back to world point ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .bundle import (
    FeatureSet,
    MatchSet,
    PredictionSet,
    SceneBundle,
    ViewRecord,
)
from .errors import InputError, InvisibleScene
from .geometry import Intrinsics, RigidPose, so3_exp

RAY_EPS = 1e-9
HIT_TOL = 1e-6


@dataclass(frozen=True)
class SceneSpec:
    """Layout parameters for a synthetic scene."""

    num_references: int = 10
    num_world_points: int = 400
    scene_extent: float = 3.0
    camera_ring_radius: float = 4.0
    camera_height: float = 4.0
    image_width: int = 160
    image_height: int = 120
    focal: float = 140.0
    num_planes: int = 3
    descriptor_dim: int = 32
    min_visible_points: int = 8
    rng_seed: int = 0

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            fx=self.focal, fy=self.focal,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width, height=self.image_height,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown scene spec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CorruptionSpec:
    """How far the predicted side deviates from the ground truth.

    The similarity (scale, axis-angle rotation, translation) maps local
    coordinates to ground truth; noise magnitudes are in local units
    except the pixel-valued keypoint noise. Outlier fractions count
    reference views (center outliers) or match rows (rewired matches).
    """

    sim_scale: float = 1.0
    sim_rotation_axis_angle: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    sim_translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    pointmap_noise_sigma: float = 0.0
    center_noise_sigma: float = 0.0
    keypoint_noise_sigma: float = 0.0
    descriptor_noise_sigma: float = 0.0
    center_outlier_fraction: float = 0.0
    match_outlier_fraction: float = 0.0

    @property
    def sim_rotation(self) -> np.ndarray:
        return so3_exp(np.asarray(self.sim_rotation_axis_angle, dtype=np.float64))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sim_rotation_axis_angle"] = list(self.sim_rotation_axis_angle)
        out["sim_translation"] = list(self.sim_translation)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CorruptionSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown corruption fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("sim_rotation_axis_angle", "sim_translation"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray


@dataclass
class SceneData:
    """Ground-truth scene before prediction synthesis."""

    spec: SceneSpec
    gt_poses: List[RigidPose]
    planes: List[Plane]
    world_points: np.ndarray
    source_view: np.ndarray
    keypoint_ids: List[List[int]]
    keypoints: List[np.ndarray]
    point_descriptors: np.ndarray


@dataclass
class OracleRecord:
    """Exact answers for a simulated bundle."""

    gt_query_pose: RigidPose
    true_scale: float
    true_align_rotation: np.ndarray
    sim_translation: np.ndarray
    world_points: np.ndarray
    keypoint_point_ids: List[List[int]]

    def to_json_dict(self) -> dict:
        return {
            "gt_query_pose": self.gt_query_pose.flat12(),
            "true_scale": float(self.true_scale),
            "true_align_rotation": np.asarray(self.true_align_rotation).reshape(-1).tolist(),
            "sim_translation": np.asarray(self.sim_translation).tolist(),
            "world_points": np.asarray(self.world_points).tolist(),
            "keypoint_point_ids": [list(map(int, ids)) for ids in self.keypoint_point_ids],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "OracleRecord":
        return cls(
            gt_query_pose=RigidPose.from_flat12(data["gt_query_pose"]),
            true_scale=float(data["true_scale"]),
            true_align_rotation=np.array(data["true_align_rotation"],
                                         dtype=np.float64).reshape(3, 3),
            sim_translation=np.array(data["sim_translation"], dtype=np.float64),
            world_points=np.array(data["world_points"], dtype=np.float64),
            keypoint_point_ids=[list(map(int, ids))
                                for ids in data["keypoint_point_ids"]],
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True),
            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "OracleRecord":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def look_at_pose(center: np.ndarray, target: np.ndarray) -> RigidPose:
    """Camera pose at ``center`` with +z toward ``target``, +y downward."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm < RAY_EPS:
        raise InputError("camera center coincides with its target")
    forward = forward / norm
    reference = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, reference)
    if np.linalg.norm(right) < 1e-8:
        reference = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, reference)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidPose(np.stack([right, down, forward], axis=1), center)


def _cast_rays(origin: np.ndarray, directions: np.ndarray,
               planes: Sequence[Plane]) -> np.ndarray:
    """Nearest positive ray parameter per direction, inf when no hit."""
    t_best = np.full(len(directions), np.inf)
    for plane in planes:
        denom = directions @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((plane.point - origin) @ plane.normal) / denom
        valid = (np.abs(denom) > RAY_EPS) & (t > RAY_EPS)
        t_best = np.where(valid & (t < t_best), t, t_best)
    return t_best


def render_pointmap(pose: RigidPose, intrinsics: Intrinsics,
                    planes: Sequence[Plane]) -> Tuple[np.ndarray, np.ndarray]:
    """Exact camera-frame point map and hit mask for one view.

    For every pixel the ray through its center is intersected with the
    planes; the point map stores ray_direction * t in the camera frame
    (so channel 2 is the depth) and the confidence is 1 on hits, 0 on
    misses, where the point map is zero.
    """
    h, w = intrinsics.height, intrinsics.width
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dc = np.stack([
        (uu - intrinsics.cx) / intrinsics.fx,
        (vv - intrinsics.cy) / intrinsics.fy,
        np.ones_like(uu),
    ], axis=-1).reshape(-1, 3)
    dw = dc @ pose.rotation.T
    t = _cast_rays(pose.center, dw, planes)
    hit = np.isfinite(t)
    pointmap = np.where(hit[:, None], dc * np.where(hit, t, 0.0)[:, None], 0.0)
    confidence = hit.astype(np.float64)
    return pointmap.reshape(h, w, 3), confidence.reshape(h, w)


def _sample_planes(spec: SceneSpec, rng: np.random.Generator) -> List[Plane]:
    planes = []
    for _ in range(spec.num_planes):
        offset = np.array([
            rng.uniform(-0.5, 0.5) * spec.scene_extent,
            rng.uniform(-0.5, 0.5) * spec.scene_extent,
            rng.uniform(-0.2, 0.2) * spec.scene_extent / 3.0,
        ])
        normal = np.array([
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.2, 0.2),
            1.0,
        ])
        planes.append(Plane(point=offset, normal=normal / np.linalg.norm(normal)))
    return planes


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> SceneData:
    """Build ground-truth cameras, surfaces, points, and observations.

    References are ordered by ascending distance to the query before
    any points are sourced, so view index 1 is the top retrieval hit.
    Points are assigned to reference views round-robin; each is created
    at an unused integer pixel of its source view and kept only where
    its reprojection is occlusion-consistent. Raises InvisibleScene
    when any view sees fewer than ``min_visible_points`` points.
    """
    if spec.num_references < 2:
        raise InputError("need at least two reference cameras")
    intr = spec.intrinsics
    planes = _sample_planes(spec, rng)

    ref_centers = []
    for k in range(spec.num_references):
        angle = 2.0 * np.pi * k / spec.num_references + rng.uniform(-0.15, 0.15)
        radius = spec.camera_ring_radius * rng.uniform(0.92, 1.08)
        height = spec.camera_height * rng.uniform(0.95, 1.05)
        ref_centers.append(np.array([
            radius * np.cos(angle), radius * np.sin(angle), height,
        ]))
    query_angle = rng.uniform(0.0, 2.0 * np.pi)
    query_center = np.array([
        spec.camera_ring_radius * rng.uniform(0.9, 1.1) * np.cos(query_angle),
        spec.camera_ring_radius * rng.uniform(0.9, 1.1) * np.sin(query_angle),
        spec.camera_height * rng.uniform(0.95, 1.05),
    ])

    order = sorted(range(spec.num_references),
                   key=lambda k: float(np.linalg.norm(ref_centers[k] - query_center)))
    gt_poses = [look_at_pose(query_center, np.zeros(3))]
    for k in order:
        gt_poses.append(look_at_pose(ref_centers[k], np.zeros(3)))
    num_views = spec.num_references + 1

    per_source = int(np.ceil(spec.num_world_points / spec.num_references))
    world_points = []
    source_view = []
    source_pixel = []
    for s in range(1, num_views):
        if len(world_points) >= spec.num_world_points:
            break
        pose = gt_poses[s]
        flat = rng.choice(intr.width * intr.height, size=per_source, replace=False)
        us = (flat % intr.width).astype(np.float64)
        vs = (flat // intr.width).astype(np.float64)
        dc = np.stack([
            (us - intr.cx) / intr.fx,
            (vs - intr.cy) / intr.fy,
            np.ones_like(us),
        ], axis=1)
        dw = dc @ pose.rotation.T
        t = _cast_rays(pose.center, dw, planes)
        for i in range(per_source):
            if len(world_points) >= spec.num_world_points:
                break
            if not np.isfinite(t[i]):
                continue
            world_points.append(pose.center + t[i] * dw[i])
            source_view.append(s)
            source_pixel.append([us[i], vs[i]])
    world_points = np.array(world_points)
    source_view = np.array(source_view, dtype=np.int64)
    source_pixel = np.array(source_pixel)
    if len(world_points) < spec.min_visible_points:
        raise InvisibleScene(
            f"only {len(world_points)} points hit the surfaces")

    visible = np.zeros((num_views, len(world_points)), dtype=bool)
    pixels = np.zeros((num_views, len(world_points), 2))
    for view in range(num_views):
        pose = gt_poses[view]
        offsets = world_points - pose.center
        cam = offsets @ pose.rotation
        z = cam[:, 2]
        front = z > RAY_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([
                intr.fx * cam[:, 0] / z + intr.cx,
                intr.fy * cam[:, 1] / z + intr.cy,
            ], axis=1)
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
        t_hit = _cast_rays(pose.center, offsets, planes)
        unoccluded = np.isfinite(t_hit) & (np.abs(t_hit - 1.0) <= HIT_TOL)
        visible[view] = inside & unoccluded
        pixels[view][visible[view]] = uv[visible[view]]

    # A point is observed in its source view at the exact integer pixel
    # it was cast through; reprojection roundoff must not evict it or
    # smear that coordinate.
    for pid in range(len(world_points)):
        visible[source_view[pid], pid] = True
        pixels[source_view[pid], pid] = source_pixel[pid]

    for view in range(num_views):
        count = int(np.count_nonzero(visible[view]))
        if count < spec.min_visible_points:
            raise InvisibleScene(
                f"view {view} sees only {count} of {len(world_points)} points")

    keypoint_ids = []
    keypoints = []
    for view in range(num_views):
        ids = np.flatnonzero(visible[view]).tolist()
        keypoint_ids.append(ids)
        keypoints.append(pixels[view][ids].copy())

    descriptors = rng.normal(size=(len(world_points), spec.descriptor_dim))
    descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)

    return SceneData(
        spec=spec,
        gt_poses=gt_poses,
        planes=planes,
        world_points=world_points,
        source_view=source_view,
        keypoint_ids=keypoint_ids,
        keypoints=keypoints,
        point_descriptors=descriptors,
    )


def corrupt_scene(
    scene: SceneData,
    corruption: CorruptionSpec,
    rng: np.random.Generator,
) -> Tuple[SceneBundle, OracleRecord]:
    """Derive the predicted side from the ground truth and package it.

    Local poses and point maps are the ground truth pushed through the
    inverse similarity, then noised. Center outliers displace a fixed
    number of reference local centers by 1 to 2 scene extents. Match
    outliers rewire the second column of existing rows.
    """
    spec = scene.spec
    intr = spec.intrinsics
    num_views = len(scene.gt_poses)
    scale = float(corruption.sim_scale)
    if scale <= 0:
        raise InputError("similarity scale must be positive")
    sim_r = corruption.sim_rotation
    sim_t = np.asarray(corruption.sim_translation, dtype=np.float64)

    local_poses = []
    for pose in scene.gt_poses:
        local_poses.append(RigidPose(
            sim_r.T @ pose.rotation,
            sim_r.T @ (pose.center - sim_t) / scale,
        ))
    if corruption.center_noise_sigma > 0:
        local_poses = [
            RigidPose(p.rotation, p.center + rng.normal(
                scale=corruption.center_noise_sigma, size=3))
            for p in local_poses
        ]
    num_outliers = int(round(corruption.center_outlier_fraction
                             * (num_views - 1)))
    if num_outliers > 0:
        chosen = rng.choice(num_views - 1, size=num_outliers, replace=False)
        for ref in chosen:
            view = 1 + int(ref)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            magnitude = rng.uniform(1.0, 2.0) * spec.scene_extent / scale
            pose = local_poses[view]
            local_poses[view] = RigidPose(pose.rotation,
                                          pose.center + direction * magnitude)

    point_maps = []
    confidences = []
    for pose in scene.gt_poses:
        pm, conf = render_pointmap(pose, intr, scene.planes)
        pm = pm / scale
        if corruption.pointmap_noise_sigma > 0:
            noise = rng.normal(scale=corruption.pointmap_noise_sigma,
                               size=pm.shape)
            pm = pm + noise * (conf[:, :, None] > 0)
        point_maps.append(pm.astype(np.float32))
        confidences.append(conf.astype(np.float32))

    features = []
    for view in range(num_views):
        kps = scene.keypoints[view].copy()
        if corruption.keypoint_noise_sigma > 0 and len(kps):
            kps = kps + rng.normal(scale=corruption.keypoint_noise_sigma,
                                   size=kps.shape)
            kps[:, 0] = np.clip(kps[:, 0], 0.0, intr.width - 1)
            kps[:, 1] = np.clip(kps[:, 1], 0.0, intr.height - 1)
        desc = scene.point_descriptors[scene.keypoint_ids[view]].copy()
        if corruption.descriptor_noise_sigma > 0 and len(desc):
            desc = desc + rng.normal(scale=corruption.descriptor_noise_sigma,
                                     size=desc.shape)
            desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        features.append(FeatureSet(
            keypoints=kps.astype(np.float32),
            descriptors=desc.astype(np.float32),
        ))

    position = [
        {pid: k for k, pid in enumerate(ids)} for ids in scene.keypoint_ids
    ]
    matches: Dict[Tuple[int, int], MatchSet] = {}
    for i in range(1, num_views):
        for j in range(i + 1, num_views):
            rows = [
                (position[i][pid], position[j][pid])
                for pid in scene.keypoint_ids[i]
                if scene.source_view[pid] == i and pid in position[j]
            ]
            if not rows:
                continue
            pairs = np.array(rows, dtype=np.int64)
            num_bad = int(round(corruption.match_outlier_fraction * len(pairs)))
            if num_bad > 0:
                bad_rows = rng.choice(len(pairs), size=num_bad, replace=False)
                pairs[bad_rows, 1] = rng.integers(
                    0, len(scene.keypoint_ids[j]), size=num_bad)
            matches[(i, j)] = MatchSet(pairs=pairs)

    # Seed-unique query id so bundles from different seeds can share an
    # evaluation set without identifier collisions.
    query_id = f"query_{scene.spec.rng_seed:04d}"
    views = [ViewRecord(query_id, intr, gt_pose=scene.gt_poses[0])]
    for rank in range(1, num_views):
        views.append(ViewRecord(f"ref_{rank:02d}", intr,
                                gt_pose=scene.gt_poses[rank]))
    bundle = SceneBundle(
        views=views,
        retrieval=list(range(1, num_views)),
        predictions=PredictionSet(
            point_maps=point_maps,
            confidence=confidences,
            local_poses=local_poses,
        ),
        features=features,
        matches=matches,
    )
    oracle = OracleRecord(
        gt_query_pose=scene.gt_poses[0],
        true_scale=scale,
        true_align_rotation=sim_r,
        sim_translation=sim_t,
        world_points=scene.world_points,
        keypoint_point_ids=scene.keypoint_ids,
    )
    return bundle, oracle


def simulate_bundle(
    spec: SceneSpec,
    corruption: CorruptionSpec = CorruptionSpec(),
) -> Tuple[SceneBundle, OracleRecord]:
    """Generate a scene and its corrupted bundle from the scene-spec seed.

    Scene geometry and corruption draw from separate child streams, so
    changing corruption parameters never moves the cameras or points.
    """
    scene_seq, corrupt_seq = np.random.SeedSequence(spec.rng_seed).spawn(2)
    scene = generate_scene(spec, np.random.default_rng(scene_seq))
    return corrupt_scene(scene, corruption, np.random.default_rng(corrupt_seq))
