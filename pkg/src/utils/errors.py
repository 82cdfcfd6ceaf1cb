"""Exception hierarchy.

Each family maps to one CLI exit code (see ``exit_code_for``).
"""

from __future__ import annotations


class MedLsdmError(Exception):
    exit_code = 1


# --- configuration (exit 2) ---

class ConfigError(MedLsdmError, ValueError):
    exit_code = 2

    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        super().__init__(message)
        self.keys = keys


class ConfigRangeError(ConfigError):
    pass


# --- data (exit 3) ---

class DataError(MedLsdmError):
    exit_code = 3


class NiftiFormatError(DataError):
    pass


class UnsupportedDtypeError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class InvalidLabelError(DataError, ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class GeometryError(DataError, ValueError):
    pass


class UnlabeledEntryError(DataError):
    pass


# --- training (exit 4) ---

class TrainingDivergenceError(MedLsdmError, FloatingPointError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


# --- checkpoints (exit 5) ---

class CheckpointCorruptError(MedLsdmError):
    exit_code = 5


class CheckpointVersionError(MedLsdmError):
    exit_code = 5


# --- contract violations ---

# input contract violations (exit 3)
class ShapeError(MedLsdmError, ValueError):
    exit_code = 3


class DomainError(MedLsdmError, ValueError):
    exit_code = 3


# numeric failures (exit 4)
class NumericError(MedLsdmError, ArithmeticError):
    exit_code = 4


class NonFiniteError(DataError, NumericError, ValueError):
    """NaN or Inf in volume data; a data error first (exit 3)."""


def exit_code_for(exc: BaseException) -> int:
    return int(getattr(exc, "exit_code", 1))
