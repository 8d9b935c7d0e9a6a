"""Exception hierarchy shared across the toolkit."""


class LlhomogError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(LlhomogError):
    """A scalar parameter violates its admissible range."""


class ResolutionError(LlhomogError):
    """A grid is too coarse for the requested operation."""


class GridMismatchError(LlhomogError):
    """Two fields that must share a grid do not."""


class ConsistencyError(LlhomogError):
    """Two independent computation paths disagree beyond tolerance."""


class NumericalError(LlhomogError):
    """Non-finite values or instability detected during integration."""


class ConfigError(LlhomogError):
    """Invalid configuration file or option.

    ``line`` is the 1-based line number in the config file when the error
    can be attributed to one.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
