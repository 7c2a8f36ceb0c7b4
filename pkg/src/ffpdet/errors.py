"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or shape contract (CLI exit code 2)."""


class ShapeError(ConfigError):
    """Operand shapes are incompatible."""


class DataError(RuntimeError):
    """Dataset on disk is missing, corrupt or inconsistent."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or does not match the model."""


class TrainingError(RuntimeError):
    """Training diverged or cannot proceed."""
