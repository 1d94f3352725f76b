"""Learnable spatio-temporal sampling.

Propagates a feature map ``F_t`` to time ``t+k``.  Every output cell ``p0``
attends over ``N`` sampling locations ``p0 + offset_n`` shared by all cells:
the embedded source ``f(F_t)`` is sampled bilinearly at those locations and
scored by dot product against ``g(F_tk)`` at ``p0``.  Normalised scores then
weight bilinear samples of the raw ``F_t``.  The offsets are ordinary
trainable parameters.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import Variable, as_variable
from .ops import ConvSpec
from .tensor import ShapeError

INITS = ("gaussian", "uniform")
NORMALIZE_MODES = ("softmax", "ratio")


@dataclass
class LstsConfig:
    n_samples: int = 9
    init: str = "gaussian"
    similarity: str = "dot"
    normalize: str = "softmax"
    embed_channels: int = 0  # 0 -> max(1, C // 4)
    radius: float = 4.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.similarity != "dot":
            raise ValueError("only dot-product similarity is supported")
        if self.normalize not in NORMALIZE_MODES:
            raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
        if self.embed_channels < 0 or self.radius <= 0:
            raise ValueError("embed_channels must be >= 0 and radius positive")

    def embed_width(self, channels: int) -> int:
        return self.embed_channels or max(1, channels // 4)


@dataclass
class OffsetSet:
    """N global sampling displacements, rows (dx, dy) in feature cells."""

    param: Variable
    init: str = "gaussian"
    trainable: bool = True

    @classmethod
    def from_array(cls, offsets, init="fixed", trainable=True):
        arr = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
        if arr.shape[0] < 1:
            raise ValueError("an offset set needs at least one location")
        return cls(Variable(arr, requires_grad=trainable, name="offsets"), init, trainable)

    @property
    def values(self) -> np.ndarray:
        return self.param.value

    def __len__(self):
        return self.param.shape[0]

    def mean(self) -> np.ndarray:
        return self.param.value.mean(axis=0)


def init_offsets(config: LstsConfig, seed: int, trainable: bool = True) -> OffsetSet:
    """Gaussian: N i.i.d. draws of N(0, I).  Uniform: a regular grid over the
    square of half-width ``radius`` when N is a perfect square, else i.i.d.
    uniform draws over that square."""
    n = config.n_samples
    if n < 1:
        raise ValueError(f"invalid sample count {n}")
    rng = np.random.default_rng(seed)
    if config.init == "gaussian":
        off = rng.standard_normal((n, 2))
    else:
        r = config.radius
        side = math.isqrt(n)
        if side * side == n:
            axis = np.array([0.0]) if side == 1 else np.linspace(-r, r, side)
            gy, gx = np.meshgrid(axis, axis, indexing="ij")
            off = np.stack([gx.ravel(), gy.ravel()], axis=1)
        else:
            off = rng.uniform(-r, r, size=(n, 2))
    return OffsetSet(Variable(off, requires_grad=trainable, name="offsets"), config.init, trainable)


def integer_grid(radius: int) -> np.ndarray:
    """All integer displacements with |dx|, |dy| <= radius, row-major in (dy, dx)."""
    r = int(radius)
    axis = np.arange(-r, r + 1, dtype=np.float64)
    gy, gx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def offset_parameters(offsets: OffsetSet):
    if not offsets.trainable:
        raise ValueError("offset set is not trainable")
    return [offsets.param]


@dataclass
class EmbeddingPair:
    """1x1 bias-free embeddings f (source side) and g (target side)."""

    f: ConvSpec
    g: ConvSpec

    def __post_init__(self):
        if self.f.out_channels != self.g.out_channels:
            raise ShapeError("f and g must embed into the same channel count")

    @classmethod
    def random(cls, c_src, embed, rng, c_tgt=None):
        c_tgt = c_src if c_tgt is None else c_tgt
        return cls(ConvSpec.random(c_src, embed, 1, rng, bias=False, name="f"),
                   ConvSpec.random(c_tgt, embed, 1, rng, bias=False, name="g"))

    def parameters(self):
        return self.f.parameters() + self.g.parameters()


def propagate(F_t, F_tk, offsets, emb: EmbeddingPair, config: LstsConfig = None,
              return_weights: bool = False):
    """Propagate ``F_t`` to the frame of ``F_tk``; returns a (C, H, W) Variable.

    ``offsets`` may be an :class:`OffsetSet`, an array or a Variable of shape (N, 2).
    """
    config = config or LstsConfig()
    F_t, F_tk = as_variable(F_t), as_variable(F_tk)
    if F_t.value.ndim != 3 or F_tk.value.ndim != 3 or F_t.shape[1:] != F_tk.shape[1:]:
        raise ShapeError(f"feature shapes {F_t.shape} and {F_tk.shape} are not compatible")
    param = offsets.param if isinstance(offsets, OffsetSet) else as_variable(offsets)
    src = ops.conv2d(F_t, emb.f)
    tgt = ops.conv2d(F_tk, emb.g)
    scores = ops.channel_dot(ops.shifted_sample(src, param), tgt)
    weights = ops.normalize_weights(scores, config.normalize, axis=0)
    out = ops.weighted_sum(ops.shifted_sample(F_t, param), weights)
    return (out, weights) if return_weights else out


def global_attention(F_t, F_tk, emb: EmbeddingPair, return_weights: bool = False):
    """Attention of every target cell over every in-bounds source cell."""
    F_t, F_tk = as_variable(F_t), as_variable(F_tk)
    if F_t.value.ndim != 3 or F_t.shape[1:] != F_tk.shape[1:]:
        raise ShapeError(f"feature shapes {F_t.shape} and {F_tk.shape} are not compatible")
    C, H, W = F_t.shape
    src = ops.reshape(ops.conv2d(F_t, emb.f), (-1, H * W))
    tgt = ops.reshape(ops.conv2d(F_tk, emb.g), (-1, H * W))
    scores = ops.matmul(ops.transpose(tgt), src)  # (target cell, source cell)
    weights = ops.normalize_weights(scores, "softmax", axis=1)
    out = ops.reshape(ops.matmul(ops.reshape(F_t, (C, H * W)), ops.transpose(weights)), (C, H, W))
    return (out, weights) if return_weights else out


# -- offset CSV ----------------------------------------------------------------

def write_offsets_csv(path, offsets) -> None:
    arr = offsets.values if isinstance(offsets, OffsetSet) else np.asarray(offsets)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "dx", "dy"])
        for n, (dx, dy) in enumerate(arr.reshape(-1, 2)):
            w.writerow([n, repr(float(dx)), repr(float(dy))])


def read_offsets_csv(path) -> np.ndarray:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["n", "dx", "dy"]:
        raise ValueError(f"{path}: expected header 'n,dx,dy'")
    try:
        data = [(float(r[1]), float(r[2])) for r in rows[1:] if r]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed offset row") from exc
    return np.array(data, dtype=np.float64).reshape(-1, 2)
