"""Exception hierarchy.

Each class carries the CLI exit code used for its error class.
"""


class CcsqError(Exception):
    exit_code = 1


class UsageError(CcsqError):
    exit_code = 1


class ValidationError(CcsqError, ValueError):
    """Malformed input: files, labels, shapes, configuration."""

    exit_code = 2


class ConfigurationError(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class TooShortError(ValidationError):
    pass


class DegenerateStatisticsError(CcsqError, ArithmeticError):
    """A statistic is undefined for constant input."""

    exit_code = 3


class DivergenceError(CcsqError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, epoch=None, fold=None):
        super().__init__(message)
        self.epoch = epoch
        self.fold = fold
