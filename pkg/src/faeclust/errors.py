"""Exception and warning types raised across the package."""


class FaeClustError(Exception):
    """Base class for all package errors."""


class DataError(FaeClustError, ValueError):
    """Input data violates a documented invariant (CLI exit code 2)."""


class NumericalError(FaeClustError, ArithmeticError):
    """A numerical procedure failed (CLI exit code 3)."""


class InvalidBasisConfig(DataError):
    pass


class InvalidSamplePath(DataError):
    pass


class OutOfDomain(DataError):
    pass


class BasisMismatch(DataError):
    pass


class SingularSystem(NumericalError):
    pass


class GridTooSmall(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class InvalidSpec(DataError):
    pass


class InvalidWarp(NumericalError):
    pass


class InvalidConfig(DataError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class StaleCache(FaeClustError, RuntimeError):
    pass


class DivergenceDetected(NumericalError):
    pass


class NoValidPartition(NumericalError):
    pass


class DegenerateVarianceWarning(UserWarning):
    pass


class DegenerateCutWarning(UserWarning):
    pass


class MaxIterExceededWarning(UserWarning):
    pass


class SuspectedSplitWarning(UserWarning):
    pass
