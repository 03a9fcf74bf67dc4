"""Exception types shared across the package."""


class InputDomainError(ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or references missing data."""


class ScheduleError(ArithmeticError):
    """A noise schedule cannot support the requested operation."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (e.g. a non-PSD covariance)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss.

    ``dump_path`` points at the diagnostic checkpoint written before raising,
    when one was requested.
    """

    def __init__(self, message, step=None, dump_path=None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path
