"""Exception hierarchy shared across the package."""


class LcmaeError(Exception):
    """Base class for all package errors."""


class ShapeError(LcmaeError):
    """Tensor extents incompatible with the requested operation."""


class NumericError(LcmaeError):
    """Non-finite values where finite ones are required."""


class ContractError(LcmaeError):
    """An internal calling contract was violated (bad graph, bad plan, ...)."""


class ConfigError(LcmaeError):
    """Invalid or unknown configuration value."""


class DataError(LcmaeError):
    """Degenerate input data (batch of one for batch norm, single-class probe, ...)."""


class CheckpointError(LcmaeError):
    """Checkpoint or dataset file failed to parse or verify."""
