"""Hybrid windowed-attention transformer with CNN feature fusion.

The package is organized by concern:

- ``tensor``/``nn``/``gradcheck``: the differentiable substrate
- ``swint``/``branches``/``model``: the three branches and their fusion
- ``data``/``augment``: dataset ingestion, splitting, and augmentation
- ``train``/``checkpoint``: optimization loop and resumable snapshots
- ``metrics``: confusion-matrix rates, PR curves, feature projection
- ``cli``: the ``rsfme`` command
"""

from .errors import (CheckpointError, ConfigError, DataError,
                     DivergenceError, NumericalError, ShapeError)
from .model import GEOMETRIES, TINY, FULL, VARIANTS, HybridClassifier, build_variant
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "HybridClassifier",
    "build_variant",
    "GEOMETRIES",
    "VARIANTS",
    "TINY",
    "FULL",
    "ShapeError",
    "NumericalError",
    "DivergenceError",
    "DataError",
    "CheckpointError",
    "ConfigError",
    "__version__",
]
