"""Exception hierarchy.

``DataError`` subclasses signal bad inputs (CLI exit code 2) and
``NumericalError`` subclasses signal solver or arithmetic breakdown
(CLI exit code 3).
"""


class DflError(Exception):
    """Base class for every error raised by this package."""


class DataError(DflError):
    pass


class NumericalError(DflError):
    pass


# -- ingestion --------------------------------------------------------------


class ParseError(DataError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MissingValue(ParseError):
    pass


class MalformedRow(ParseError):
    pass


class NonMonotoneDates(ParseError):
    pass


class InsufficientHistory(DataError):
    pass


class DegenerateWindow(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


# -- numerics ---------------------------------------------------------------


class NotPositiveDefinite(NumericalError):
    pass


class NumericalFailure(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class DegenerateActiveSet(NumericalError):
    """Weak complementarity: the solution map has a kink at this point."""

    def __init__(self, message, indices=()):
        self.indices = tuple(indices)
        super().__init__(message)


class TapeMismatch(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class DegenerateBaseline(NumericalError):
    pass


class ZeroVolatility(NumericalError):
    pass


class TotalLoss(NumericalError):
    pass


class ZeroVector(NumericalError):
    pass


class DegenerateCrossSection(NumericalError):
    pass
