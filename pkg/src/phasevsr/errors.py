"""Exception types shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class PhaseVSRError(Exception):
    exit_code = 1


class ConfigError(PhaseVSRError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    """Malformed or incomplete annotation / report / checkpoint."""


class DataError(PhaseVSRError, ValueError):
    exit_code = 3


class ShapeError(PhaseVSRError, ValueError):
    exit_code = 4


class TrainingDivergedError(DataError):
    """Raised when a loss or tensor turns non-finite during training."""
