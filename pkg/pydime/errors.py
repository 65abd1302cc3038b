"""Exceptions raised by pydime. Each class carries the category reported by the command line
interface and the exit code used for it."""


class PydimeError(Exception):
    """Base class for all pydime errors."""

    category = 'error'
    exit_code = 1


class ConfigurationError(PydimeError, ValueError):
    """Invalid configuration value or combination of values."""

    category = 'config'
    exit_code = 3


class FormatError(PydimeError, ValueError):
    """A file does not follow the expected layout."""

    category = 'format'
    exit_code = 4


class StateError(PydimeError, RuntimeError):
    """An operation was called before the data it needs was computed."""

    category = 'state'
    exit_code = 5


class TrainingError(PydimeError, RuntimeError):
    """Numerical failure, e.g. a non-finite training loss."""

    category = 'numeric'
    exit_code = 6


class ArgumentError(PydimeError, ValueError):
    """Arguments with incompatible shapes or out of range."""

    category = 'argument'
    exit_code = 7


class DegenerateInputError(PydimeError, ValueError):
    """Input for which the requested quantity is undefined (zero norm, single class, ...)."""

    category = 'degenerate'
    exit_code = 8
