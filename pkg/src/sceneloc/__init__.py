"""Scene-agnostic camera localization from predicted point maps.

Given a bundle of per-view predicted point maps, confidence maps, and
local (scale-free) poses plus ground-truth reference poses, the pipeline
recovers metric scale, initializes the query pose, refines sparse 3D
structure, and solves the final 6-DoF query pose.
"""

from .bundle import SceneBundle, read_bundle, write_bundle
from .errors import InputError, PipelineError, SceneLocError
from .geometry import (
    Intrinsics,
    RigidPose,
    SimilarityTransform,
    backproject,
    bilinear_sample,
    chordal_rotation_angle,
    orthonormalize,
    project,
    rotation_angle,
    so3_exp,
    triangulate_pair,
)
from .pipeline import LocalizationResult, RunConfig, localize_bundle

__version__ = "0.1.0"

__all__ = [
    "InputError",
    "PipelineError",
    "SceneLocError",
    "Intrinsics",
    "LocalizationResult",
    "RigidPose",
    "RunConfig",
    "SceneBundle",
    "SimilarityTransform",
    "backproject",
    "bilinear_sample",
    "chordal_rotation_angle",
    "localize_bundle",
    "orthonormalize",
    "project",
    "read_bundle",
    "rotation_angle",
    "so3_exp",
    "triangulate_pair",
    "write_bundle",
    "__version__",
]
