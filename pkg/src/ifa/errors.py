"""Exception hierarchy shared by every module."""


class IFAError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IFAError, ValueError):
    """Operand shapes do not chain."""


class UsageError(IFAError, RuntimeError):
    """API misuse: stale caches, oversized oracle calls, bad flags."""


class DataError(IFAError, ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(IFAError, ValueError):
    """Invalid model, training or generator configuration."""


class TrainingError(IFAError, RuntimeError):
    """Non-finite values encountered while optimizing."""
