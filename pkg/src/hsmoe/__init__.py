"""Hierarchical soft mixture-of-experts routing on a gated state-space
backbone, with a 3D encoder-decoder for volumetric segmentation and a
verification harness (gradient checks, routing oracles, scaling benchmarks).
"""

from .tensor import Tensor, backward, rng

__all__ = ["Tensor", "backward", "rng"]
__version__ = "0.1.0"
