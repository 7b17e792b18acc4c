"""SkipV1 attention: models, KV-cache accounting, conversion and the mesa-optimizer lab."""
from .checkpoint_io import load, save
from .config import HeadInjection, ModelConfig, VariantKind
from .convert import ConversionStrategy, convert, initial_loss_compare
from .errors import (
    ConfigurationError, DataError, DimensionError, EstimationError, FormatError, LengthError,
    NumericError, OptimizationError, SkipV1Error, TrainingError, VariantError,
)
from .kvcache import CacheSpec, DecodeCache, bytes_per_token, cache_report, decode_sequence, decode_step
from .model import Checkpoint, forward, init_weights, param_count, window_loss

__version__ = "0.1.0"

__all__ = [
    "CacheSpec", "Checkpoint", "ConfigurationError", "ConversionStrategy", "DataError", "DecodeCache",
    "DimensionError", "EstimationError", "FormatError", "HeadInjection", "LengthError", "ModelConfig",
    "NumericError", "OptimizationError", "SkipV1Error", "TrainingError", "VariantError", "VariantKind",
    "bytes_per_token", "cache_report", "convert", "decode_sequence", "decode_step", "forward",
    "init_weights", "initial_loss_compare", "load", "param_count", "save", "window_loss",
]
