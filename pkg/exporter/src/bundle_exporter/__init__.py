"""Scene-bundle exporter: turn images plus camera metadata into the
bundle directory format consumed by the localization CLI."""

from .errors import ContractViolation, ExporterError, JobError, ModelError
from .export import export_bundle
from .job import CameraIntrinsics, ExportJob, load_cameras, load_job

__all__ = [
    "CameraIntrinsics",
    "ContractViolation",
    "ExportJob",
    "ExporterError",
    "JobError",
    "ModelError",
    "export_bundle",
    "load_cameras",
    "load_job",
]

__version__ = "0.1.0"
