"""Text-to-vector generation with a latent space of cubic Bezier paths."""

__version__ = "0.1.0"

from .errors import (BackendError, ConfigError, DatasetError, FitError, MetricError, NeuralPathError, NumericError,
                     StructuralError)
from .geometry import AffineTransform, BezierPath

__all__ = [
    "AffineTransform",
    "BackendError",
    "BezierPath",
    "ConfigError",
    "DatasetError",
    "FitError",
    "MetricError",
    "NeuralPathError",
    "NumericError",
    "StructuralError",
    "__version__",
]
