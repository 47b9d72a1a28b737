"""Exception hierarchy.

Errors split into two families that the CLI maps to distinct exit codes:
configuration/validation problems (user input is wrong) and numerical
failures (the input is fine but a solve could not meet its contract).
"""


class BhjbError(Exception):
    """Base class for all package errors."""


class ConfigError(BhjbError):
    """Malformed or inconsistent configuration; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DimensionError(BhjbError, ValueError):
    pass


class IncompleteDataError(BhjbError, KeyError):
    pass


class ValidationFailed(BhjbError):
    """A problem or tree failed validation; ``report`` holds the details."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(BhjbError):
    """Base class for failures during a numerical solve."""


class StabilityError(NumericalError):
    def __init__(self, message, bound):
        super().__init__(message)
        self.bound = bound


class LinearSolveError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class CordesRefusal(NumericalError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EllipticityError(NumericalError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location
