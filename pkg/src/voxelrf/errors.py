"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(ValueError):
    """Mutually inconsistent or unknown configuration values."""


class CheckpointFormatError(IOError):
    """Checkpoint file is truncated, corrupt, or has an unknown version."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; a diagnostic snapshot was written."""
