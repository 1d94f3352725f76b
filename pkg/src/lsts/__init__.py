"""Learnable spatio-temporal sampling for video feature propagation.

A small numpy stack: tensors and reverse-mode autodiff, differentiable
bilinear sampling, the learnable-offset propagation module, quality-aware
fusion, a keyframe video pipeline and a synthetic-motion data generator.
"""

from ._kernels import backend_name
from .autodiff import Variable, backward, grad_check, no_grad
from .sampler import EmbeddingPair, LstsConfig, OffsetSet, init_offsets, propagate

__version__ = "0.1.0"

__all__ = ["Variable", "backward", "grad_check", "no_grad", "EmbeddingPair", "LstsConfig",
           "OffsetSet", "init_offsets", "propagate", "backend_name"]
