"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: :class:`DataError` -> 2,
:class:`NumericalError` -> 3.
"""


class DeepStressError(Exception):
    """Base class for all engine errors."""


class DataError(DeepStressError, ValueError):
    """Malformed, missing or inconsistent input data."""


class InvariantViolation(DataError):
    """A record breaks a domain invariant (e.g. negative assets)."""


class DuplicateRecordError(DataError):
    """Two records share the same (bank_id, quarter) key."""


class InsufficientHistoryError(DataError):
    """A bank lacks the lagged quarters a feature recipe requires."""


class NumericalError(DeepStressError, ArithmeticError):
    """Non-finite values, singular systems or diverging training."""


class SingularMatrixError(NumericalError):
    """A regression design is rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class CarDomainError(NumericalError, ZeroDivisionError):
    """CAR requested for a non-positive RWA."""
