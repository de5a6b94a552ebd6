"""avuextract: turn media clips into avu feature bundles."""

from .errors import DependencyError, ExtractError, JobError, MediaError
from .extract import ExtractionJob, extract

__all__ = ["DependencyError", "ExtractError", "ExtractionJob", "JobError",
           "MediaError", "extract"]
