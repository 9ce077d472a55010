"""Exception types shared across the package."""


class FGMoEError(Exception):
    """Base class for all package errors."""


class DimensionError(FGMoEError, ValueError):
    """Shapes are incompatible for the requested operation."""


class ConfigError(FGMoEError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class GraphError(FGMoEError, RuntimeError):
    """The autodiff graph was used outside its contract."""


class GradCheckError(FGMoEError, RuntimeError):
    """The gradient checker could not produce a trustworthy verdict."""


class FormatError(FGMoEError, ValueError):
    """A binary file is corrupt, truncated, or has the wrong version."""


class MetricError(FGMoEError, ValueError):
    """A metric is undefined for the given predictions/targets."""


class TrainingError(FGMoEError, RuntimeError):
    """Training hit a non-recoverable state (e.g. a non-finite loss)."""
