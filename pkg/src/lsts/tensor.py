"""Dense rank-3 feature maps.

A tensor here is simply a C-contiguous float64 ``numpy.ndarray`` of shape
``(C, H, W)``.  The helpers below enforce the rank-3 contract and the
restricted broadcasting used by the fusion weights.
"""

from pathlib import Path
from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class Point2(NamedTuple):
    """A sampling location in feature-cell units (x along width, y along height)."""

    x: float
    y: float


def as_tensor(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected a rank-3 (C, H, W) tensor, got shape {arr.shape}")
    return arr


def new(shape, fill: float = 0.0) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    return np.full(shape, float(fill), dtype=np.float64)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def check_broadcast(a_shape, b_shape):
    C, H, W = a_shape
    if tuple(b_shape) in ((C, H, W), (C, 1, 1), (1, H, W)):
        return
    raise ShapeError(f"cannot broadcast {tuple(b_shape)} onto {tuple(a_shape)}")


def elementwise_binary(a, b, op: str) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul``; ``b`` may be a (C,1,1) or (1,H,W) map."""
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    check_broadcast(a.shape, b.shape)
    return fn(a, b)


def reduce_sum(a, axis=None):
    """Total sum (a float) or a sum over one axis, kept as a size-1 axis."""
    a = as_tensor(a)
    if axis is None:
        return float(a.sum())
    if axis not in (0, 1, 2):
        raise ValueError(f"axis {axis} out of range for a rank-3 tensor")
    return a.sum(axis=axis, keepdims=True)


def concat_channels(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def channel_slice(a, start: int, stop: int) -> np.ndarray:
    return as_tensor(a)[start:stop].copy()


# -- text serialisation ------------------------------------------------------

def format_tensor(a) -> str:
    a = as_tensor(a)
    header = "{} {} {}".format(*a.shape)
    body = " ".join(repr(float(v)) for v in a.ravel())
    return header + "\n" + body + "\n"


def parse_tensor(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 3:
        raise ValueError("tensor text is missing its 'C H W' header")
    shape = tuple(int(t) for t in tokens[:3])
    values = np.array([float(t) for t in tokens[3:]], dtype=np.float64)
    if values.size != shape[0] * shape[1] * shape[2]:
        raise ValueError(f"expected {np.prod(shape)} values for shape {shape}, got {values.size}")
    return values.reshape(shape)


def save_tensor(path, a) -> None:
    Path(path).write_text(format_tensor(a))


def load_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_text())
