"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""


class FormatError(ValueError):
    """A data file is malformed; the message names the byte offset."""


class SamplingError(ValueError):
    """A split cannot supply the requested episode."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
