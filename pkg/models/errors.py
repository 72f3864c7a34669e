"""
Error Types

Exceptions raised across the assessment pipeline. Each one derives from a
builtin so callers can keep catching ``ValueError`` / ``OSError``; the CLI maps
them to exit codes.
"""


class DimensionError(ValueError):
    """Operands have non-conforming shapes."""


class ContractError(ValueError):
    """An API pre-condition was violated by the caller."""


class ConfigError(ValueError):
    """Configuration is invalid, unknown, or inconsistent with a checkpoint."""


class ParameterError(ValueError):
    """A numeric parameter lies outside its documented range."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or diverged."""


class DataError(OSError):
    """Input data or an output location is unreadable, corrupt, or empty."""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, (ConfigError, ParameterError)):
        return EXIT_USAGE
    if isinstance(error, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(error, (NumericalError, DimensionError, ContractError)):
        return EXIT_NUMERICAL
    return EXIT_USAGE
