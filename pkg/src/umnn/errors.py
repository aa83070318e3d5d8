"""Exception hierarchy shared by all modules."""


class UMNNError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(UMNNError, ValueError):
    """Invalid hyper-parameter, layer layout or run configuration."""


class DimensionError(UMNNError, ValueError):
    """Array shapes that do not agree with the model or with each other."""


class NumericError(UMNNError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InversionRangeError(NumericError):
    """Bisection could not bracket the target value."""


class DegenerateDataError(UMNNError, ValueError):
    """Data with a zero-variance dimension cannot be standardized."""


class ModelFormatError(UMNNError, ValueError):
    """Corrupt, truncated or incompatible model file."""
