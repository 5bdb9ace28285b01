"""lapseg: Laplacian-pyramid frequency attention for texture-sensitive
semantic segmentation, built on a minimal deterministic numpy autodiff
engine with numba-accelerated spatial kernels."""

from .backend import backend_name
from .tensor import Tape, Tensor, tensor, zeros, ones

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "tensor", "zeros", "ones", "backend_name", "__version__"]
