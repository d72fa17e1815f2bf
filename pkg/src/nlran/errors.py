"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or shape-infeasible."""


class DataError(RuntimeError):
    """A dataset, manifest, or volume file is missing or malformed."""


class FormatError(RuntimeError):
    """A binary container (tensor file, checkpoint) failed to parse."""


class NumericError(ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""
