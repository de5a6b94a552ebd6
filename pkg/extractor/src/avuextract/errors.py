class ExtractError(Exception):
    """Base class for everything this tool raises on purpose."""


class MediaError(ExtractError):
    """The input media cannot be decoded."""


class DependencyError(ExtractError):
    """A requested embedding backend is not available."""


class JobError(ExtractError):
    """The extraction job itself is invalid (bad T, bad paths)."""
