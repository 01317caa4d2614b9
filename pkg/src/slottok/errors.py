"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: input/config/format problems exit
with 2, numeric failures (non-finite values, divergence) exit with 3.
"""


class SlotTokError(Exception):
    """Base class for all package errors."""


class InputError(SlotTokError):
    """Invalid argument, precondition violation, or malformed request."""


class ConfigError(InputError):
    """Invalid or inconsistent run configuration."""


class FormatError(InputError):
    """File does not conform to its declared binary/JSON layout."""


class StorageError(SlotTokError):
    """I/O failure while reading or writing artifacts."""


class CapacityError(InputError):
    """Sequence exceeds the model's positional capacity."""


class NumericError(SlotTokError):
    """Non-finite values or numerical divergence."""
