"""Camera pose algebra, projection, triangulation, image sampling.

Conventions used across the package:
  * Poses are stored camera-to-world: ``rotation`` maps camera axes into
    world axes and ``center`` is the camera position in world coordinates.
    The world-to-camera map is derived where projection needs it.
  * Pixel coordinates put the origin at the top-left pixel, with the
    center of pixel (i, j) at exactly (i, j); u runs along the width.
  * Camera frame: +x right (u), +y down (v), +z forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import (
    CheiralityFailure,
    DegenerateBaseline,
    InvalidDepth,
    InvariantViolation,
    NonPositiveDepth,
    ReprojectionRejected,
)

DEPTH_EPS = 1e-9
BASELINE_EPS = 1e-6


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix to ``m`` (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = skew(w)
    if theta < 1e-8:
        # Taylor terms keep the small-angle branch accurate to machine eps
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle in degrees between two rotations, via the trace of ra @ rb^T.

    The trace argument is clamped so that near-identity and near-pi
    relative rotations never produce NaN.
    """
    m = np.asarray(ra, dtype=np.float64) @ np.asarray(rb, dtype=np.float64).T
    c = (np.trace(m) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def chordal_rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle in degrees between two rotations from their Frobenius gap.

    Algebraically identical to :func:`rotation_angle`
    (``|ra - rb|_F = 2*sqrt(2)*sin(theta/2)``) but conditioned well near
    zero, where the trace formula bottoms out around 1e-6 degrees. Used
    wherever sub-microdegree agreement has to be certified.
    """
    d = np.asarray(ra, dtype=np.float64) - np.asarray(rb, dtype=np.float64)
    s = np.linalg.norm(d) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(2.0 * np.arcsin(np.clip(s, 0.0, 1.0))))


def _frozen(a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise InvariantViolation(f"expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvariantViolation("non-finite values")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + center."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "center", _frozen(self.center, (3,)))

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise InvariantViolation("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise InvariantViolation("rotation determinant is not +1")

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.center)

    def world_to_camera(self, x_world: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        x = np.asarray(x_world, dtype=np.float64)
        return (x - self.center) @ self.rotation

    def camera_to_world(self, x_cam: np.ndarray) -> np.ndarray:
        """Map camera-frame points (..., 3) into the world frame."""
        x = np.asarray(x_cam, dtype=np.float64)
        return x @ self.rotation.T + self.center

    def as_matrix34(self) -> np.ndarray:
        """3x4 matrix [rotation | center]."""
        return np.hstack([self.rotation, self.center[:, None]])

    def flat12(self) -> list:
        """Row-major 12-number serialization of [rotation | center]."""
        return [float(v) for v in self.as_matrix34().reshape(-1)]

    @classmethod
    def from_flat12(cls, values, reorthonormalize: bool = False) -> "RigidPose":
        m = np.asarray(values, dtype=np.float64)
        if m.shape != (12,):
            raise InvariantViolation(f"pose needs 12 numbers, got {m.shape}")
        m = m.reshape(3, 4)
        r, c = m[:, :3], m[:, 3]
        if reorthonormalize:
            drift = np.max(np.abs(r.T @ r - np.eye(3)))
            if drift > 1e-6:
                raise InvariantViolation("stored rotation is far from orthonormal")
            # Snap only rotations that are measurably off the manifold.
            # A matrix that is orthonormal to float64 precision must pass
            # through untouched so a write/read cycle is bit-exact.
            if drift > 1e-12:
                r = orthonormalize(r)
        return cls(r, c)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the image size they apply to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantViolation("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise InvariantViolation("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvariantViolation("principal point outside the image")

    def contains(self, uv: np.ndarray) -> np.ndarray:
        """Mask of pixel coordinates (..., 2) inside [0, W-1] x [0, H-1]."""
        uv = np.asarray(uv)
        return (
            (uv[..., 0] >= 0.0)
            & (uv[..., 0] <= self.width - 1.0)
            & (uv[..., 1] >= 0.0)
            & (uv[..., 1] <= self.height - 1.0)
        )


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise InvariantViolation("similarity scale must be positive")
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.scale * (x @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(
            1.0 / self.scale, rt, -(rt @ self.translation) / self.scale
        )


def project_depths(
    pose: RigidPose, intr: Intrinsics, x_world: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Project points (..., 3) without validity checks.

    Returns (uv, z) where z is camera-frame depth; callers mask on z
    themselves. Division by a non-positive z produces unusable pixels,
    never an exception.
    """
    xc = pose.world_to_camera(x_world)
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.cx + intr.fx * xc[..., 0] / z
        v = intr.cy + intr.fy * xc[..., 1] / z
    return np.stack([u, v], axis=-1), z


def project(pose: RigidPose, intr: Intrinsics, x_world: np.ndarray) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises NonPositiveDepth if the point is not strictly in front of the
    camera.
    """
    xc = pose.world_to_camera(np.asarray(x_world, dtype=np.float64))
    if xc[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {xc[2]:.3e}")
    return np.array([
        intr.cx + intr.fx * xc[0] / xc[2],
        intr.cy + intr.fy * xc[1] / xc[2],
    ])


def backproject(
    pose: RigidPose, intr: Intrinsics, pixel: np.ndarray, depth: float
) -> np.ndarray:
    """Lift a pixel at a given camera-frame depth back into world space."""
    if not depth > 0:
        raise InvalidDepth(f"depth {depth!r} must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    xc = np.array([
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    ])
    return pose.camera_to_world(xc)


def _projection_matrix(pose: RigidPose, intr: Intrinsics) -> np.ndarray:
    """World-to-pixel 3x4 matrix K [R^T | -R^T c]."""
    k = np.array([
        [intr.fx, 0.0, intr.cx],
        [0.0, intr.fy, intr.cy],
        [0.0, 0.0, 1.0],
    ])
    rt = pose.rotation.T
    return k @ np.hstack([rt, (-rt @ pose.center)[:, None]])


def triangulate_pair(
    pose_a: RigidPose,
    intr_a: Intrinsics,
    pixel_a: np.ndarray,
    pose_b: RigidPose,
    intr_b: Intrinsics,
    pixel_b: np.ndarray,
    max_reproj_px: float = 4.0,
) -> np.ndarray:
    """Two-view linear (DLT) triangulation with consistency checks.

    Raises DegenerateBaseline for near-coincident centers,
    CheiralityFailure if the point falls behind either camera, and
    ReprojectionRejected if either reprojection error exceeds
    ``max_reproj_px``.
    """
    if np.linalg.norm(pose_a.center - pose_b.center) < BASELINE_EPS:
        raise DegenerateBaseline("camera centers nearly coincide")
    pa = _projection_matrix(pose_a, intr_a)
    pb = _projection_matrix(pose_b, intr_b)
    ua, va = float(pixel_a[0]), float(pixel_a[1])
    ub, vb = float(pixel_b[0]), float(pixel_b[1])
    a = np.stack([
        ua * pa[2] - pa[0],
        va * pa[2] - pa[1],
        ub * pb[2] - pb[0],
        vb * pb[2] - pb[1],
    ])
    _, _, vt = np.linalg.svd(a)
    xh = vt[-1]
    if abs(xh[3]) < 1e-12:
        raise CheiralityFailure("triangulated point at infinity")
    x = xh[:3] / xh[3]
    for pose, intr, pix in ((pose_a, intr_a, pixel_a), (pose_b, intr_b, pixel_b)):
        xc = pose.world_to_camera(x)
        if xc[2] <= DEPTH_EPS:
            raise CheiralityFailure("point behind camera")
        uv = np.array([
            intr.cx + intr.fx * xc[0] / xc[2],
            intr.cy + intr.fy * xc[1] / xc[2],
        ])
        err = np.linalg.norm(uv - np.asarray(pix, dtype=np.float64))
        if err > max_reproj_px:
            raise ReprojectionRejected(f"reprojection error {err:.2f} px")
    return x


def bilinear_sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinearly sample an HxW or HxWxC array at continuous pixel (u, v).

    Pixel centers sit at integer coordinates; coordinates are clamped to
    the valid interpolation domain, so sampling at an integer pixel
    returns that pixel's value exactly.
    """
    h, w = image.shape[:2]
    u = min(max(float(uv[0]), 0.0), float(w - 1))
    v = min(max(float(uv[1]), 0.0), float(h - 1))
    x0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    img = image.astype(np.float64, copy=False)
    return (
        (1.0 - fu) * (1.0 - fv) * img[y0, x0]
        + fu * (1.0 - fv) * img[y0, x1]
        + (1.0 - fu) * fv * img[y1, x0]
        + fu * fv * img[y1, x1]
    )
