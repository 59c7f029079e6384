"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the documented domain of an operation."""


class InvariantError(RuntimeError):
    """A structural assumption (unimodality, architecture match, ...) failed."""


class NumericError(ArithmeticError):
    """A computation produced NaN/inf or otherwise left the numeric domain."""


class StudyError(RuntimeError):
    """Too many replications failed for a study to be aggregated."""
