"""Spatio-temporal graph attention forecasting for road-sensor traffic."""

from .errors import DataError, ForecastError, NumericError, UsageError
from .model import Forecaster, ModelConfig, load_checkpoint, save_checkpoint

__all__ = [
    "DataError",
    "ForecastError",
    "Forecaster",
    "ModelConfig",
    "NumericError",
    "UsageError",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
