"""Exporter error hierarchy.

JobError covers defective inputs: the job file, camera file, or images.
ModelError covers model lookup and inference failures. ContractViolation
means the assembled outputs break the bundle format contract; it is
raised before anything touches the output directory.
"""


class ExporterError(Exception):
    """Base class for everything this package raises on purpose."""


class JobError(ExporterError):
    """The job description or its referenced inputs are unusable."""


class ModelError(ExporterError):
    """A model identifier is unknown or inference failed."""


class ContractViolation(ExporterError):
    """Assembled outputs would produce an invalid bundle."""
