"""Exception hierarchy shared across the package."""


class MLAPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MLAPError, ValueError):
    """Invalid configuration, hyperparameter or operand shape."""


class UsageError(MLAPError, ValueError):
    """An API was called in a way its contract does not allow."""


class DatasetError(MLAPError, ValueError):
    """Malformed graph data."""


class LoadError(DatasetError):
    """A file could not be parsed into the expected structure."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeneratorError(MLAPError, RuntimeError):
    """The synthetic generator could not satisfy its constraints."""


class NumericError(MLAPError, ArithmeticError):
    """Training produced a non-finite value."""


class EvaluationError(MLAPError, ValueError):
    """A metric is undefined for the given predictions."""


class StatisticsError(MLAPError, ValueError):
    """Not enough data for a statistical test."""
