"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes, group counts or divisibility constraints do not line up."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class FormatError(ValueError):
    """A serialized artifact (cube file, checkpoint) is malformed."""


class CheckpointError(FormatError):
    """A checkpoint file cannot be read back into a model."""


class ConfigError(ValueError):
    """A run configuration is invalid or contains unknown keys."""
