"""Real-time hash-grid radiance fields with attention fusion and distance-grid marching."""

from ngprt.errors import (
    BakeError,
    ConfigError,
    DomainError,
    LoadError,
    NormalizationError,
    OrderingError,
    ShapeError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "BakeError",
    "ConfigError",
    "DomainError",
    "LoadError",
    "NormalizationError",
    "OrderingError",
    "ShapeError",
    "TrainingError",
]
