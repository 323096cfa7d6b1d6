"""Exception hierarchy shared by the library and the command line."""


class StannError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(StannError, ValueError):
    """Malformed configuration or invalid command-line usage."""

    exit_code = 1


class DataError(StannError, ValueError):
    """Input data failed validation (bad CSV, gaps, non-positive prices)."""

    exit_code = 2


class NumericError(StannError, ArithmeticError):
    """A numeric computation produced an undefined or non-finite result."""

    exit_code = 3


class UndefinedMetricError(NumericError):
    """A metric is undefined for the given inputs (e.g. zero scale)."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    The last finite checkpoint is attached as ``checkpoint``.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ShapeError(StannError, ValueError):
    """Operand shapes are incompatible for the requested operation."""
