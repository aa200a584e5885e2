"""Exception hierarchy shared across the engine.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
BundleIOError -> 3, NumericalError -> 4.
"""


class ProtoAdaptError(Exception):
    """Base class for all engine errors."""


class ConfigError(ProtoAdaptError):
    """Invalid configuration, manifest contents, or argument combination."""


class BundleIOError(ProtoAdaptError):
    """Missing files or failed reads/writes of interchange directories."""


class NumericalError(ProtoAdaptError):
    """Non-finite values detected where finite data is required."""
