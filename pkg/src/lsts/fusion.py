"""Quality-aware aggregation and the low-to-high transform unit."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import as_variable
from .ops import ConvSpec
from .tensor import ShapeError

# Channel counts of the full-size architecture; desk runs multiply them by a
# width factor (minimum one channel).
SCORE_WIDTHS = (256, 16, 1)
TRANSFORM_WIDTHS = (256, 512, 1024)


def scaled(width: int, factor: float) -> int:
    return max(1, int(round(width * factor)))


@dataclass
class AggregationUnit:
    """Score net: 3x3 -> w1, relu, 1x1 -> w2, relu, 1x1 -> 1 score map."""

    layers: tuple

    @classmethod
    def build(cls, channels, rng, width_factor=1.0, zero_last=True):
        """``zero_last`` starts the final score layer at zero, so the unit
        begins as the fixed 0.5 / 0.5 blend and learns from there."""
        w1 = scaled(SCORE_WIDTHS[0], width_factor)
        w2 = scaled(SCORE_WIDTHS[1], width_factor)
        return cls((
            ConvSpec.random(2 * channels, w1, 3, rng, name="agg.0"),
            ConvSpec.random(w1, w2, 1, rng, name="agg.1"),
            ConvSpec.random(w2, 1, 1, rng, zero=zero_last, name="agg.2"),
        ))

    @property
    def channels(self):
        return self.layers[0].in_channels // 2

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def score(self, x):
        h = ops.conv2d(x, self.layers[0], "relu")
        h = ops.conv2d(h, self.layers[1], "relu")
        return ops.conv2d(h, self.layers[2])


class ConstantScore:
    """Stand-in score net that emits the same map for every stream."""

    def __init__(self, value=0.0):
        self.value = value

    def score(self, x):
        x = as_variable(x)
        return as_variable(np.full((1,) + x.shape[1:], float(self.value)))

    def parameters(self):
        return []


def fuse(a, b, unit):
    """Blend two same-shaped features with per-position softmax weights.

    Each stream is scored by the shared net in the context of the other
    (``a||b`` for ``a``, ``b||a`` for ``b``).  Returns ``(fused, w_a, w_b)``
    with ``w_a + w_b == 1`` everywhere.
    """
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse {a.shape} with {b.shape}")
    s_a = unit.score(ops.concat_channels(a, b))
    s_b = unit.score(ops.concat_channels(b, a))
    w_a, w_b = ops.softmax_over_streams([s_a, s_b])
    fused = ops.add(ops.mul(a, w_a), ops.mul(b, w_b))
    return fused, w_a, w_b


def fuse_fixed(a, b):
    a, b = as_variable(a), as_variable(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot fuse {a.shape} with {b.shape}")
    return ops.scale(ops.add(a, b), 0.5)


@dataclass
class TransformUnit:
    """Three 3x3 convolutions lifting low-level features to ``out_channels``."""

    layers: tuple

    @classmethod
    def build(cls, in_channels, out_channels, rng, width_factor=1.0):
        w1 = scaled(TRANSFORM_WIDTHS[0], width_factor)
        w2 = scaled(TRANSFORM_WIDTHS[1], width_factor)
        return cls((
            ConvSpec.random(in_channels, w1, 3, rng, name="transform.0"),
            ConvSpec.random(w1, w2, 3, rng, name="transform.1"),
            ConvSpec.random(w2, out_channels, 3, rng, name="transform.2"),
        ))

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def transform(low, unit: TransformUnit):
    low = as_variable(low)
    if low.value.ndim != 3 or low.shape[0] != unit.in_channels:
        raise ShapeError(f"transform expects {unit.in_channels} channels, got {low.shape}")
    h = ops.conv2d(low, unit.layers[0], "relu")
    h = ops.conv2d(h, unit.layers[1], "relu")
    return ops.conv2d(h, unit.layers[2])
