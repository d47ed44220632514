"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed binary file (bad magic, version, or length)."""


class NotInvertibleError(ValueError):
    """Schedule value requested on a flat (non-advancing) segment."""


class NormalizationError(ValueError):
    """Dataset statistics unusable for normalization (e.g. zero variance)."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during training; carries the offending batch seed."""

    def __init__(self, message, step=None, batch_seed=None):
        super().__init__(message)
        self.step = step
        self.batch_seed = batch_seed
