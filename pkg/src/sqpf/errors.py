"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class SQPFError(Exception):
    """Base class for all package errors."""


class DataError(SQPFError, ValueError):
    """Malformed input data: bad volumes, shapes, labels, or pools."""


class NumericalError(SQPFError, ArithmeticError):
    """A computation produced or received non-finite / undefined values."""


class DivergenceError(NumericalError):
    """Training loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
