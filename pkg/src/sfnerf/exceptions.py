class SFNeRFError(Exception):
    """Base class for errors raised by this package."""


class IngestionError(SFNeRFError):
    """Dataset, manifest or feature file could not be read consistently."""


class ConfigError(SFNeRFError, ValueError):
    """Invalid configuration value."""


class NumericError(SFNeRFError, FloatingPointError):
    """A non-finite value appeared where a finite one is required.

    ``context`` carries whatever identifies the failure (ray indices, step,
    loss term, image id).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class CheckpointError(SFNeRFError):
    """Checkpoint is unreadable, from another format version, or incompatible."""
