"""Exception hierarchy shared across the package.

The CLI maps these onto distinct process exit codes, so raising the right
subclass matters at module boundaries.
"""


class IqlutError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(IqlutError):
    """Invalid configuration, flags, or inconsistent model geometry."""

    exit_code = 2


class DataError(IqlutError):
    """Unreadable, missing, or malformed input data."""

    exit_code = 3


class IntegrityError(IqlutError):
    """Corrupt serialized payload: bad magic, version, or checksum."""

    exit_code = 4


class DivergenceError(IqlutError):
    """Training produced a non-finite loss."""

    exit_code = 5
