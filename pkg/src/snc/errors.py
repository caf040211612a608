"""Exception types shared across the package.

The CLI maps ConfigurationError to exit code 2 and every other SncError
to exit code 1.
"""


class SncError(Exception):
    pass


class ConfigurationError(SncError):
    """Invalid configuration: bad layer specs, unknown config keys, missing fields."""


class DimensionError(SncError):
    """Incompatible shapes or bit widths."""


class FormatError(SncError):
    """Corrupt or malformed file payload (checkpoint, store, IDX)."""


class NumericError(SncError):
    """Non-finite values encountered during a forward pass."""


class EmptyStoreError(SncError):
    """Query issued against an empty code store."""
