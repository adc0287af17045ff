"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.py).
"""


class KarlError(Exception):
    """Base class for all package errors."""


class ConfigError(KarlError):
    """Invalid, missing, or inconsistent configuration."""


class InputError(KarlError):
    """An operation received arguments violating its preconditions."""


class DataError(KarlError):
    """Dataset could not be loaded or is unusable."""


class CheckpointMismatchError(KarlError):
    """Checkpoint config digest does not match the runtime config."""
