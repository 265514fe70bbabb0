"""Exception types; the CLI maps each family onto an exit code."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class DataError(Exception):
    """Unreadable or inconsistent input data (exit code 3)."""


class FormatError(DataError):
    """Malformed ETNS file or container; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint does not match the expected configuration or shapes."""


class EnsembleSizeError(ValueError):
    """Too few ensemble members for the requested statistic."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during training or evaluation (exit code 4)."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class TrainingError(RuntimeError):
    """Optimizer misuse, e.g. a parameter without a gradient."""
