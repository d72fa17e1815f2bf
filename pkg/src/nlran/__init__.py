"""nlran: a desk-scale 3D residual-attention + non-local CT classification lab."""

from .model import NetworkConfig, build, count_flops, count_params
from .tensor import Tensor, finite_difference_check

__all__ = [
    "NetworkConfig",
    "Tensor",
    "build",
    "count_flops",
    "count_params",
    "finite_difference_check",
]
