"""Exception hierarchy shared by the library and the command-line tool."""


class PerkError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class DataError(PerkError, ValueError):
    """Invalid input values, shapes or files."""

    exit_code = 2


class ConfigError(PerkError, ValueError):
    """Malformed run configuration; the message carries the offending key path."""

    exit_code = 1


class NumericalError(PerkError, ArithmeticError):
    """A factorization, solve or iteration failed numerically."""

    exit_code = 3


class ConvergenceError(NumericalError):
    pass
