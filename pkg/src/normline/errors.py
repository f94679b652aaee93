"""Exception types shared across the package."""


class NormlineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(NormlineError, ValueError):
    """Operand dimensions do not satisfy an operation's contract."""


class NumericsError(NormlineError, ArithmeticError):
    """A public operation produced NaN or Inf."""


class DataError(NormlineError, ValueError):
    """Malformed records, ids out of vocabulary range, or bad labels."""


class ProtocolError(NormlineError, RuntimeError):
    """Layer state-machine misuse, e.g. backward without a matching forward."""


class MetricError(NormlineError, ValueError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class CheckpointError(NormlineError, RuntimeError):
    """Corrupt, truncated, or version-incompatible checkpoint file."""


class ConfigError(NormlineError, ValueError):
    """Invalid experiment configuration value or key."""
