"""Exception taxonomy shared across the package.

Two branches matter for the CLI: InputError maps to exit code 2
(malformed or inconsistent inputs), PipelineError maps to exit code 3
(well-formed inputs on which no pose can be recovered).
"""


class SceneLocError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SceneLocError):
    """Malformed or self-inconsistent input data."""


class PipelineError(SceneLocError):
    """Valid input on which the localization pipeline cannot proceed."""


# --- input / validation ---------------------------------------------------

class IoFailure(InputError):
    """File missing, unreadable, or undecodable."""


class BadMagic(InputError):
    """Binary blob does not start with the expected magic bytes."""


class ShapeMismatch(InputError):
    """Array dimensions disagree with the manifest or the blob header."""


class MissingBlob(InputError):
    """Manifest references a blob file that does not exist."""


class InvariantViolation(InputError):
    """A structural invariant of a loaded or written object is broken."""


class EmptyInput(InputError):
    """An operation that needs at least one element received none."""


class InvisibleScene(InputError):
    """A generated scene leaves some camera with too few visible points."""


# --- pipeline -------------------------------------------------------------

class NonPositiveDepth(PipelineError):
    """Point does not lie in front of the camera."""


class InvalidDepth(PipelineError):
    """Sampled or supplied depth is not usable (zero, negative, miss)."""


class DegenerateBaseline(PipelineError):
    """Two camera centers are too close to triangulate."""


class CheiralityFailure(PipelineError):
    """Triangulated point falls behind one of the cameras."""


class ReprojectionRejected(PipelineError):
    """Triangulated point reprojects too far from its observations."""


class NoReferencesSurvive(PipelineError):
    """Reference filtering removed every view."""


class NoValidPairs(PipelineError):
    """No reference pair falls inside the usable baseline range."""


class EmptySamples(PipelineError):
    """No depth-ratio sample survived triangulation and depth checks."""


class DegenerateRadius(PipelineError):
    """Trajectory spread is too small to define a deviation."""


class TooFewCameras(PipelineError):
    """An operation over camera trajectories needs more cameras."""


class AllCandidatesDegenerate(PipelineError):
    """Every RANSAC candidate was rejected before scoring."""


class NoScaleAvailable(PipelineError):
    """Neither scale recovery stage produced an estimate."""


class TooFewCorrespondences(PipelineError):
    """Pose solving needs at least four 2D-3D correspondences."""


class SolverDegenerate(PipelineError):
    """Minimal solver input admits no stable solution."""
