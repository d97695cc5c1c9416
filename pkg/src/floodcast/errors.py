"""Exception hierarchy shared by all floodcast modules.

The CLI maps these onto exit codes: usage problems exit 1, bad or
insufficient data exits 2, numerical failures exit 3.
"""


class FloodcastError(Exception):
    """Base class for all package errors."""


class ConfigError(FloodcastError, ValueError):
    """Invalid configuration or command-line usage."""


class DataError(FloodcastError, ValueError):
    """Input data is malformed, inconsistent or insufficient."""


class InsufficientDataError(DataError):
    pass


class GeometryMismatchError(DataError):
    pass


class NumericError(FloodcastError, ArithmeticError):
    """A numerical procedure failed (singular system, divergence, ...)."""


class SingularSystemError(NumericError):
    pass


class DivergenceError(NumericError):
    pass
