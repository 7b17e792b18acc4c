"""Exception hierarchy shared across the package."""


class SkipV1Error(Exception):
    """Base class for all package errors."""


class DimensionError(SkipV1Error, ValueError):
    pass


class ConfigurationError(SkipV1Error, ValueError):
    pass


class VariantError(ConfigurationError):
    """Raised when an operation receives a model of the wrong variant."""


class LengthError(SkipV1Error, ValueError):
    pass


class NumericError(SkipV1Error, ArithmeticError):
    """Non-finite value encountered; ``index`` points at the offending coordinate."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EstimationError(NumericError):
    pass


class OptimizationError(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(OptimizationError):
    pass


class DataError(SkipV1Error, ValueError):
    pass


class FormatError(SkipV1Error, ValueError):
    """Malformed checkpoint or config file."""
