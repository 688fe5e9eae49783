"""Deterministic inference models behind the exporter.

These are compact stand-ins for production networks: their weights are
generated from fixed seeds at construction, so a given model id always
produces bit-identical outputs for the same inputs. That determinism is
what the export pipeline's reproducibility tests lean on.

Three roles, each with its own registry:

- reconstruction: image -> per-pixel point map, confidence map, and a
  camera pose estimate in the model's native world-to-camera convention.
- features: image -> sparse keypoints with unit-norm descriptors.
- retrieval: per-view descriptor sets -> reference ranking for the query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ModelError
from .job import CameraIntrinsics


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------


@dataclass
class ReconstructionResult:
    """Dense prediction for one view, pose in world-to-camera form."""

    point_map: np.ndarray        # (H, W, 3) float32, camera frame lifted to pose
    confidence: np.ndarray       # (H, W) float32, >= 0
    rotation_w2c: np.ndarray     # (3, 3) float64
    translation_w2c: np.ndarray  # (3,) float64


def _axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3)
    axis = w / theta
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


class TinyReconstruction(nn.Module):
    """Small convolutional depth/confidence/pose network with fixed weights."""

    def __init__(self, seed: int = 101):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.trunk = nn.Sequential(
            nn.Conv2d(1, 12, kernel_size=5, padding=2),
            nn.GELU(),
            nn.Conv2d(12, 12, kernel_size=3, padding=1),
            nn.GELU(),
        )
        self.head = nn.Conv2d(12, 2, kernel_size=3, padding=1)
        self.pose_head = nn.Linear(12, 6)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.empty_like(p).normal_(0.0, 0.2, generator=gen))
        self.eval()

    @torch.no_grad()
    def predict(self, image: np.ndarray, intrinsics: CameraIntrinsics) -> ReconstructionResult:
        """Run on a grayscale float32 image in [0, 1] of the intrinsics' size."""
        x = torch.from_numpy(image).float().unsqueeze(0).unsqueeze(0)
        feats = self.trunk(x)
        depth_raw, conf_raw = self.head(feats)[0]
        depth = (nn.functional.softplus(depth_raw) + 0.5).numpy().astype(np.float32)
        conf = nn.functional.softplus(conf_raw).numpy().astype(np.float32)

        h, w = depth.shape
        u = np.arange(w, dtype=np.float32)
        v = np.arange(h, dtype=np.float32)
        uu, vv = np.meshgrid(u, v)
        px = (uu - intrinsics.cx) / intrinsics.fx * depth
        py = (vv - intrinsics.cy) / intrinsics.fy * depth
        point_map = np.stack([px, py, depth], axis=-1).astype(np.float32)

        pooled = feats.mean(dim=(0, 2, 3))
        pose_vec = (self.pose_head(pooled) * 0.1).numpy().astype(np.float64)
        rotation = _axis_angle_to_matrix(pose_vec[:3])
        translation = pose_vec[3:].copy()
        return ReconstructionResult(
            point_map=point_map, confidence=conf,
            rotation_w2c=rotation, translation_w2c=translation)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


@dataclass
class FeatureResult:
    """Sparse keypoints for one view."""

    keypoints: np.ndarray    # (N, 2) float32 (u, v) at pixel centers
    descriptors: np.ndarray  # (N, D) float32, rows unit-norm


class GridPatchFeatures:
    """Response-map keypoints with standardized-patch descriptors."""

    PATCH = 7
    BORDER = 4
    MAX_KEYPOINTS = 96
    DESC_DIM = 32

    def __init__(self, seed: int = 202):
        gen = torch.Generator().manual_seed(seed)
        self.response_conv = nn.Conv2d(1, 1, kernel_size=5, padding=2)
        with torch.no_grad():
            for p in self.response_conv.parameters():
                p.copy_(torch.empty_like(p).normal_(0.0, 0.5, generator=gen))
        self.response_conv.eval()
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal(
            (self.PATCH * self.PATCH, self.DESC_DIM)) / np.sqrt(self.PATCH * self.PATCH)

    @torch.no_grad()
    def extract(self, image: np.ndarray) -> FeatureResult:
        x = torch.from_numpy(image).float().unsqueeze(0).unsqueeze(0)
        response = self.response_conv(x)[0, 0].numpy().astype(np.float64)
        h, w = response.shape

        # 3x3 non-max suppression away from the border.
        half = self.PATCH // 2
        margin = max(self.BORDER, half)
        candidates: List[Tuple[float, int, int]] = []
        for v in range(margin, h - margin):
            for u in range(margin, w - margin):
                r = response[v, u]
                patch = response[v - 1:v + 2, u - 1:u + 2]
                if r >= patch.max() and r > patch.min():
                    candidates.append((r, v, u))
        if not candidates:
            empty = np.zeros((0, 2), dtype=np.float32)
            return FeatureResult(
                keypoints=empty,
                descriptors=np.zeros((0, self.DESC_DIM), dtype=np.float32))

        resp = np.array([c[0] for c in candidates])
        vs = np.array([c[1] for c in candidates])
        us = np.array([c[2] for c in candidates])
        # Strongest response first; ties broken by (v, u) for determinism.
        order = np.lexsort((us, vs, -resp))[: self.MAX_KEYPOINTS]

        keypoints = np.stack(
            [us[order].astype(np.float32), vs[order].astype(np.float32)], axis=1)
        descriptors = np.empty((len(order), self.DESC_DIM), dtype=np.float64)
        for row, idx in enumerate(order):
            v, u = int(vs[idx]), int(us[idx])
            patch = image[v - half:v + half + 1, u - half:u + half + 1].astype(np.float64)
            flat = patch.reshape(-1)
            flat = (flat - flat.mean()) / (flat.std() + 1e-8)
            d = flat @ self.projection
            descriptors[row] = d / np.linalg.norm(d)
        return FeatureResult(
            keypoints=keypoints, descriptors=descriptors.astype(np.float32))


# --------------------------------------------------------------------------
# retrieval and matching
# --------------------------------------------------------------------------


class CosineMeanRetrieval:
    """Rank references by cosine similarity of mean descriptors."""

    def rank(self, query_desc: np.ndarray, reference_descs: Sequence[np.ndarray]) -> List[int]:
        """Return reference view indices (1-based) most similar first."""
        def mean_unit(d: np.ndarray):
            if d.shape[0] == 0:
                return None
            m = d.astype(np.float64).mean(axis=0)
            n = np.linalg.norm(m)
            return m / n if n > 0 else None

        q = mean_unit(query_desc)
        sims = []
        for d in reference_descs:
            r = mean_unit(d)
            sims.append(-np.inf if q is None or r is None else float(q @ r))
        order = np.argsort(-np.asarray(sims), kind="stable")
        return [int(i) + 1 for i in order]


def mutual_nearest_matches(
    desc_a: np.ndarray, desc_b: np.ndarray, max_distance: float = 0.9
) -> np.ndarray:
    """Mutual nearest-neighbour descriptor matches as an (M, 2) index array."""
    if desc_a.shape[0] == 0 or desc_b.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    a = desc_a.astype(np.float64)
    b = desc_b.astype(np.float64)
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i and dist[i, j] <= max_distance:
            pairs.append((i, int(j)))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


# --------------------------------------------------------------------------
# registries
# --------------------------------------------------------------------------


_RECONSTRUCTION: Dict[str, type] = {"tinyrecon-v1": TinyReconstruction}
_FEATURES: Dict[str, type] = {"gridpatch-v1": GridPatchFeatures}
_RETRIEVAL: Dict[str, type] = {"cosine-mean-v1": CosineMeanRetrieval}


def _build(registry: Dict[str, type], kind: str, model_id: str):
    cls = registry.get(model_id)
    if cls is None:
        known = ", ".join(sorted(registry))
        raise ModelError(f"unknown {kind} model {model_id!r} (available: {known})")
    return cls()


def load_reconstruction_model(model_id: str) -> TinyReconstruction:
    return _build(_RECONSTRUCTION, "reconstruction", model_id)


def load_feature_model(model_id: str) -> GridPatchFeatures:
    return _build(_FEATURES, "features", model_id)


def load_retrieval_model(model_id: str) -> CosineMeanRetrieval:
    return _build(_RETRIEVAL, "retrieval", model_id)
