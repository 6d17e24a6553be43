"""Evolving multi-scale graph forecasting for multivariate time series."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, no_grad

__all__ = ["Tensor", "Tape", "no_grad", "__version__"]
