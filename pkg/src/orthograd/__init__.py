"""Gradient orthogonalisation for first-order optimisers, with a small NumPy CNN harness."""

__version__ = "0.1.0"

from .linalg import nearest_orthonormal, normalise_columns, svd  # noqa: E402
from .optim import GradTransform, HyperParams, Optimiser  # noqa: E402

__all__ = ["GradTransform", "HyperParams", "Optimiser", "nearest_orthonormal", "normalise_columns", "svd"]
