"""Exception types raised across the package."""


class SparseFnError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SparseFnError, ValueError):
    """An argument violates a documented precondition."""


class NumericFailure(SparseFnError, ArithmeticError):
    """A factorization or solve failed even after regularization."""


class InsufficientData(SparseFnError, ValueError):
    """Not enough observations to estimate the requested quantity."""
