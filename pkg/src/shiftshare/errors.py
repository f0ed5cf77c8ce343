"""Exception hierarchy.

``DataError`` covers anything wrong with user inputs (exit code 2 in the CLI);
``NumericalError`` covers designs that are formally valid but cannot be
estimated (exit code 3).
"""


class ShiftShareError(Exception):
    """Base class for all package errors."""


class DataError(ShiftShareError, ValueError):
    """Invalid, inconsistent or missing input data."""


class NumericalError(ShiftShareError, ArithmeticError):
    """A computation cannot be carried out on the given design."""


class SingularDesignError(NumericalError):
    """A regressor matrix is rank deficient under the weighted inner product."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateInstrumentError(NumericalError):
    """The first stage covariance between instrument and regressor is zero."""


class DegenerateMomentsError(NumericalError):
    """Every moment has zero estimated variance, so no statistic exists."""

    def __init__(self, message, labels=()):
        super().__init__(message)
        self.labels = tuple(labels)
