"""Exception hierarchy.

Input problems derive from :class:`DataError` (CLI exit code 2); numerical
failures derive from :class:`NumericalError` (CLI exit code 1).
"""


class DualCoxError(Exception):
    """Base class for all package errors."""


class DataError(DualCoxError, ValueError):
    """Invalid or malformed input data."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonPositiveTime(DataError):
    pass


class MissingResponseOnLabeled(DataError):
    pass


class ResponsePresentOnUnlabeled(DataError):
    pass


class NonFiniteCovariate(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SchemaError(DataError):
    """Header or field-level violation of the CSV schema."""


class EmptyLabeledComponent(DataError):
    pass


class EmptyInput(DataError):
    pass


class NumericalError(DualCoxError, ArithmeticError):
    """A computation could not be carried out on otherwise valid input."""


class NoEvents(NumericalError):
    pass


class AllWeightsZero(NumericalError):
    pass


class EmptyRiskSet(NumericalError):
    pass


class EmptySurvivorSet(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class ComponentCollapsed(NumericalError):
    pass


class BisectionFailed(NumericalError):
    pass
