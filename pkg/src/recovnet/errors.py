"""Exception types shared across the package."""


class RecovnetError(Exception):
    """Base class for every error raised by this package."""


class ManifestError(RecovnetError):
    """Manifest file is missing, malformed, or violates a schema invariant."""


class ImageIOError(RecovnetError):
    """An image file could not be read or decoded."""


class UndefinedMetricError(RecovnetError):
    """A metric denominator is zero for the given confusion matrix."""


class CheckpointError(RecovnetError):
    """Checkpoint file is corrupt, incompatible, or of the wrong kind."""


class ConfigError(RecovnetError):
    """Bad command-line or config-file input. Maps to exit code 2."""
