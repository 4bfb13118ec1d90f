"""Exception types shared across the package."""


class TrimkvError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TrimkvError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class ConfigError(TrimkvError, ValueError):
    """A configuration value is out of range or internally inconsistent."""


class WeightsFormatError(TrimkvError, ValueError):
    """Raw weights file is malformed; the message names the offending tensor."""


class CapacityError(TrimkvError, RuntimeError):
    """Fast-tier byte budget would be exceeded."""


class TransferError(TrimkvError, RuntimeError):
    """An asynchronous transfer failed; the store is left consistent."""


class CheckpointMissingError(TrimkvError, KeyError):
    """No boundary checkpoint stored for the requested (layer, block)."""
