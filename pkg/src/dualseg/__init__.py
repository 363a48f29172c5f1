"""Desk-scale semantic segmentation with dual (position + channel) attention."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    NumericError,
)
from .tensor import Tensor, finite_diff_grad, make_rng

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "finite_diff_grad",
    "make_rng",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "NumericError",
    "__version__",
]
