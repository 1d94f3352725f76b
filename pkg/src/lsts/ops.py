"""Differentiable primitives.

Each function accepts :class:`~lsts.autodiff.Variable` objects (or plain
arrays, treated as constants) and returns a ``Variable`` whose backward rule
is recorded when any input requires a gradient.

Arithmetic cost is tallied into the active :func:`count_ops` context, one
multiply-add counted as two operations.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .autodiff import Variable, as_variable, record
from .tensor import ShapeError

_counters = []


@contextmanager
def count_ops():
    """Collect an arithmetic-operation tally: ``with count_ops() as c: ...; c.total``."""
    c = OpCount()
    _counters.append(c)
    try:
        yield c
    finally:
        # by identity: nested tallies can compare equal
        _counters[:] = [k for k in _counters if k is not c]


@dataclass
class OpCount:
    total: int = 0


def _tally(n):
    for c in _counters:
        c.total += int(n)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_variable(a), as_variable(b)
    out = a.value + b.value
    _tally(out.size)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_variable(a), as_variable(b)
    out = a.value - b.value
    _tally(out.size)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    out = av * bv
    _tally(out.size)

    def rule(g):
        return (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                _unbroadcast(g * av, b.shape) if b.requires_grad else None)

    return record(out, (a, b), rule)


def scale(a, c: float):
    a = as_variable(a)
    return record(a.value * c, (a,), lambda g: (g * c,))


def vsum(a, axis=None):
    """Sum; with ``axis=None`` the result has shape (1, 1, 1)."""
    a = as_variable(a)
    shape = a.shape
    _tally(a.value.size)
    if axis is None:
        out = np.array(a.value.sum()).reshape(1, 1, 1)
        return record(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    out = a.value.sum(axis=axis)
    return record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def relu(a):
    a = as_variable(a)
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def concat_channels(a, b):
    a, b = as_variable(a), as_variable(b)
    if a.value.ndim != 3 or b.value.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)
    return record(out, (a, b), lambda g: (g[:ca], g[ca:]))


def stack(items):
    items = [as_variable(v) for v in items]
    out = np.stack([v.value for v in items], axis=0)
    return record(out, items, lambda g: tuple(g[i] for i in range(len(items))))


def take(a, index):
    a = as_variable(a)
    out = a.value[index]

    def rule(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return record(np.array(out, copy=True), (a,), rule)


def reshape(a, shape):
    a = as_variable(a)
    orig = a.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a):
    """Transpose of a 2-D variable."""
    a = as_variable(a)
    return record(a.value.T.copy(), (a,), lambda g: (g.T,))


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_variable(a), as_variable(b)
    av, bv = a.value, b.value
    _tally(2 * av.shape[0] * av.shape[1] * bv.shape[1])

    def rule(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return record(av @ bv, (a, b), rule)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_kernel(p, q):
    """G(p, q) for point ``p`` and integer grid point ``q`` (both (x, y))."""
    return max(0.0, 1.0 - abs(p[0] - q[0])) * max(0.0, 1.0 - abs(p[1] - q[1]))


def bilinear_sample(F, points):
    """Sample ``F`` (C, H, W) at ``points`` given as (x, y) rows.

    ``points`` may be a single point (shape (2,)), giving a (C,) result, or an
    (M, 2) array giving (C, M).  Differentiable in both ``F`` and ``points``.
    """
    F, P = as_variable(F), as_variable(points)
    single = P.value.ndim == 1
    pts = P.value.reshape(-1, 2)
    xs, ys = pts[:, 0], pts[:, 1]
    Fv = F.value
    out = _kernels.sample(Fv, xs, ys)
    _tally(8 * out.size)

    def rule(g):
        g2 = g.reshape(Fv.shape[0], -1)
        dF, dxs, dys = _kernels.sample_backward(Fv, xs, ys, g2)
        dP = np.stack([dxs, dys], axis=1).reshape(P.shape)
        return (dF if F.requires_grad else None, dP if P.requires_grad else None)

    return record(out[:, 0] if single else out, (F, P), rule)


def _grid(H, W):
    ys, xs = np.mgrid[0:H, 0:W]
    return xs.astype(np.float64).ravel(), ys.astype(np.float64).ravel()


def shifted_sample(F, offsets):
    """Sample ``F`` at ``p0 + offset_n`` for every grid cell ``p0``.

    ``offsets`` has shape (N, 2) with rows (dx, dy).  Returns (N, C, H, W);
    the offset gradient sums the location gradient over all cells.
    """
    F, O = as_variable(F), as_variable(offsets)
    Fv = F.value
    C, H, W = Fv.shape
    off = O.value.reshape(-1, 2)
    N = off.shape[0]
    gx, gy = _grid(H, W)
    xs = (gx[None, :] + off[:, 0:1]).ravel()
    ys = (gy[None, :] + off[:, 1:2]).ravel()
    out = _kernels.sample(Fv, xs, ys)  # (C, N*H*W)
    _tally(8 * out.size)
    out = out.reshape(C, N, H, W).transpose(1, 0, 2, 3)

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(C, N * H * W)
        dF, dxs, dys = _kernels.sample_backward(Fv, xs, ys, g2)
        dO = np.stack([dxs.reshape(N, -1).sum(axis=1), dys.reshape(N, -1).sum(axis=1)], axis=1)
        return (dF if F.requires_grad else None, dO.reshape(O.shape) if O.requires_grad else None)

    return record(np.ascontiguousarray(out), (F, O), rule)


def displaced_sample(F, flow):
    """Sample ``F`` at ``p0 + flow(p0)``; ``flow`` is (2, H, W) with rows (dx, dy)."""
    F, Fl = as_variable(F), as_variable(flow)
    Fv = F.value
    C, H, W = Fv.shape
    if Fl.shape != (2, H, W):
        raise ShapeError(f"flow must have shape (2, {H}, {W}), got {Fl.shape}")
    gx, gy = _grid(H, W)
    xs = gx + Fl.value[0].ravel()
    ys = gy + Fl.value[1].ravel()
    out = _kernels.sample(Fv, xs, ys)
    _tally(8 * out.size)

    def rule(g):
        dF, dxs, dys = _kernels.sample_backward(Fv, xs, ys, g.reshape(C, H * W))
        dFl = np.stack([dxs.reshape(H, W), dys.reshape(H, W)])
        return (dF if F.requires_grad else None, dFl if Fl.requires_grad else None)

    return record(out.reshape(C, H, W), (F, Fl), rule)


# ---------------------------------------------------------------------------
# similarity, normalisation, aggregation
# ---------------------------------------------------------------------------

def dot_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.size} vs {b.size}")
    return float(a @ b)


def channel_dot(samples, query):
    """Per-position dot product: (N, C, H, W) x (C, H, W) -> (N, H, W)."""
    S, Q = as_variable(samples), as_variable(query)
    if S.shape[1:] != Q.shape:
        raise ShapeError(f"sample shape {S.shape} does not match query {Q.shape}")
    sv, qv = S.value, Q.value
    out = np.einsum("nchw,chw->nhw", sv, qv)
    _tally(2 * sv.size)

    def rule(g):
        return (g[:, None] * qv[None] if S.requires_grad else None,
                np.einsum("nhw,nchw->chw", g, sv) if Q.requires_grad else None)

    return record(out, (S, Q), rule)


RATIO_EPS = 1e-12


def normalize_weights(scores, mode: str = "softmax", axis: int = 0):
    """Turn similarity scores into weights summing to one along ``axis``.

    ``softmax`` subtracts the max before exponentiating.  ``ratio`` divides by
    the plain sum and refuses sums with magnitude at most 1e-12.
    """
    s = as_variable(scores)
    sv = s.value
    _tally(3 * sv.size)
    if mode == "softmax":
        e = np.exp(sv - sv.max(axis=axis, keepdims=True))
        w = e / e.sum(axis=axis, keepdims=True)

        def rule(g):
            return (w * (g - (g * w).sum(axis=axis, keepdims=True)),)

        return record(w, (s,), rule)
    if mode == "ratio":
        total = sv.sum(axis=axis, keepdims=True)
        if np.any(np.abs(total) <= RATIO_EPS):
            raise ValueError("ratio normalisation needs |sum of scores| > 1e-12")
        w = sv / total

        def rule(g):
            return ((g - (g * w).sum(axis=axis, keepdims=True)) / total,)

        return record(w, (s,), rule)
    raise ValueError(f"unknown normalisation mode {mode!r}")


def weighted_sum(samples, weights):
    """Sum over the leading axis: (N, C, H, W) with (N, H, W) weights -> (C, H, W)."""
    S, Wt = as_variable(samples), as_variable(weights)
    sv, wv = S.value, Wt.value
    out = np.einsum("nchw,nhw->chw", sv, wv)
    _tally(2 * sv.size)

    def rule(g):
        return (wv[:, None] * g[None] if S.requires_grad else None,
                np.einsum("chw,nchw->nhw", g, sv) if Wt.requires_grad else None)

    return record(out, (S, Wt), rule)


def aggregate(F, points, weights):
    """Weighted sum of bilinear samples of ``F`` at ``points`` (one output position).

    Returns a (C,) vector.  The weights must sum to one within 1e-9.
    """
    Wt = as_variable(weights)
    if abs(float(Wt.value.sum()) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {Wt.value.sum()!r}, expected 1")
    if not isinstance(points, Variable):
        points = Variable(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    samples = bilinear_sample(F, points)
    return vsum(mul(samples, reshape(Wt, (1, -1))), axis=1)


def softmax_over_streams(scores):
    """Per-position softmax across K score maps of shape (1, H, W)."""
    scores = [as_variable(s) for s in scores]
    if len(scores) < 2:
        raise ValueError("softmax over streams needs at least two score maps")
    shape = scores[0].shape
    if any(s.shape != shape for s in scores) or len(shape) != 3 or shape[0] != 1:
        raise ShapeError("stream scores must share one (1, H, W) shape")
    w = normalize_weights(stack(scores), "softmax", axis=0)
    return [take(w, k) for k in range(len(scores))]


def mse_loss(pred, target):
    """Mean squared difference, shape (1, 1, 1)."""
    p, t = as_variable(pred), as_variable(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
    diff = p.value - t.value
    n = diff.size
    _tally(3 * n)
    out = np.array((diff * diff).sum() / n).reshape(1, 1, 1)

    def rule(g):
        gv = float(g.ravel()[0]) * 2.0 / n
        return (gv * diff if p.requires_grad else None,
                -gv * diff if t.requires_grad else None)

    return record(out, (p, t), rule)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    """Stride-1, size-preserving convolution filters.

    ``weight`` is (C_out, C_in, k, k); ``bias`` is (C_out,) or ``None``.
    """

    weight: Variable
    bias: Variable = None

    def __post_init__(self):
        k = self.weight.shape[-1]
        if self.weight.value.ndim != 4 or self.weight.shape[2] != k or k % 2 == 0:
            raise ShapeError(f"conv weight must be (C_out, C_in, k, k) with odd k, "
                             f"got {self.weight.shape}")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def k(self):
        return self.weight.shape[-1]

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    @classmethod
    def random(cls, c_in, c_out, k, rng, bias=True, zero=False, name="conv"):
        """Zero-mean uniform filters scaled by 1/sqrt(fan-in); zero biases."""
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            bound = 1.0 / np.sqrt(c_in * k * k)
            w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        b = Variable(np.zeros(c_out), requires_grad=True, name=f"{name}.bias") if bias else None
        return cls(Variable(w, requires_grad=True, name=f"{name}.weight"), b)


def conv_ops(c_in, c_out, k, H, W):
    return 2 * c_in * c_out * k * k * H * W


def conv2d(x, spec: ConvSpec, activation: str = "none"):
    X = as_variable(x)
    Wt = spec.weight
    xv, wv = X.value, Wt.value
    if xv.ndim != 3 or xv.shape[0] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got shape {xv.shape}")
    C, H, W = xv.shape
    k = spec.k
    r = k // 2
    if k == 1:
        out = np.tensordot(wv[:, :, 0, 0], xv, axes=(1, 0))
        cols = None
    else:
        padded = np.pad(xv, ((0, 0), (r, r), (r, r)))
        cols = sliding_window_view(padded, (k, k), axis=(1, 2))  # (C, H, W, k, k)
        out = np.einsum("oikl,ihwkl->ohw", wv, cols, optimize=True)
    _tally(conv_ops(C, spec.out_channels, k, H, W))
    parents = [X, Wt]
    if spec.bias is not None:
        out = out + spec.bias.value[:, None, None]
        parents.append(spec.bias)
    if activation == "relu":
        mask = out > 0
        out = np.where(mask, out, 0.0)
    elif activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    else:
        mask = None

    def rule(g):
        if mask is not None:
            g = g * mask
        gx = gw = None
        if k == 1:
            if X.requires_grad:
                gx = np.tensordot(wv[:, :, 0, 0], g, axes=(0, 0))
            if Wt.requires_grad:
                gw = np.tensordot(g, xv, axes=((1, 2), (1, 2)))[:, :, None, None]
        else:
            if Wt.requires_grad:
                gw = np.einsum("ohw,ihwkl->oikl", g, cols, optimize=True)
            if X.requires_grad:
                gp = np.pad(g, ((0, 0), (r, r), (r, r)))
                gcols = sliding_window_view(gp, (k, k), axis=(1, 2))
                flipped = wv[:, :, ::-1, ::-1]
                gx = np.einsum("oikl,ohwkl->ihw", flipped, gcols, optimize=True)
        grads = [gx, gw]
        if spec.bias is not None:
            grads.append(g.sum(axis=(1, 2)) if spec.bias.requires_grad else None)
        return tuple(grads)

    return record(out, parents, rule)
