"""Exception hierarchy shared by the solvers and the CLI."""


class MFGError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MFGError):
    """Invalid or missing configuration. ``key`` names the offending entry."""

    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ConvergenceError(MFGError):
    exit_code = 3

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class CalibrationError(ConvergenceError):
    """No sign change of excess supply inside the capital bracket."""


class NumericalError(MFGError):
    exit_code = 4


class ShapeError(MFGError, ValueError):
    exit_code = 4


class DomainError(MFGError, ValueError):
    exit_code = 4


class ConstraintError(DomainError):
    """A policy violates the wealth state constraint."""


class NonUniquenessError(NumericalError):
    """Reducible generator: the stationary density is not unique."""


class BudgetError(MFGError):
    """Enumeration would exceed the configured path budget."""

    exit_code = 4
