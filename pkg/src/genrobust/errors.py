"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad or unknown configuration value (dataset id, policy id, attack/model mismatch)."""


class DatasetLoadError(OSError):
    """Dataset files are missing or unreadable."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss. ``trail`` holds the checkpoints up to the failure."""

    def __init__(self, message, trail):
        super().__init__(message)
        self.trail = trail


class CalibrationWarning(UserWarning):
    pass
