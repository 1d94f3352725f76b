"""Registry of differentiable ops for finite-difference gradient checking.

Each builder draws one random instance and returns ``(f, inputs, locations)``
for :func:`lsts.autodiff.grad_check`.  Outputs are contracted with a fixed
random probe so every output element contributes to the scalar.
"""

import time

import numpy as np

from .. import ops
from ..autodiff import Variable, grad_check
from ..fusion import AggregationUnit, TransformUnit, fuse, transform
from ..sampler import EmbeddingPair, LstsConfig, propagate


def _var(rng, shape, name, low=-1.0, high=1.0):
    return Variable(rng.uniform(low, high, size=shape), name=name)


def _probe(rng, out_shape):
    r = rng.standard_normal(out_shape)
    return lambda out: ops.vsum(ops.mul(out, r))


def _unary(fn, shape=(2, 3, 4)):
    def build(rng):
        a = _var(rng, shape, "a")
        p = _probe(rng, fn(a).shape)
        return (lambda: p(fn(a))), [a], []
    return build


def _binary(fn, shape_a=(2, 3, 4), shape_b=(2, 3, 4)):
    def build(rng):
        a, b = _var(rng, shape_a, "a"), _var(rng, shape_b, "b")
        p = _probe(rng, fn(a, b).shape)
        return (lambda: p(fn(a, b))), [a, b], []
    return build


def _matmul(rng):
    a, b = _var(rng, (3, 4), "a"), _var(rng, (4, 2), "b")
    p = _probe(rng, (3, 2))
    return (lambda: p(ops.matmul(a, b))), [a, b], []


def _stack(rng):
    a, b, c = (_var(rng, (2, 3), n) for n in "abc")
    p = _probe(rng, (3, 2, 3))
    return (lambda: p(ops.stack([a, b, c]))), [a, b, c], []


def _sampling_points(rng, n, H, W):
    pts = np.c_[rng.uniform(-1.5, W + 0.5, n), rng.uniform(-1.5, H + 0.5, n)]
    return Variable(pts, name="points")


def _bilinear_sample(rng):
    F = _var(rng, (2, 4, 5), "F")
    pts = _sampling_points(rng, 6, 4, 5)
    p = _probe(rng, (2, 6))
    return (lambda: p(ops.bilinear_sample(F, pts))), [F, pts], [pts]


def _shifted_sample(rng):
    F = _var(rng, (2, 4, 4), "F")
    off = Variable(rng.uniform(-2.0, 2.0, size=(3, 2)), name="offsets")
    p = _probe(rng, (3, 2, 4, 4))
    return (lambda: p(ops.shifted_sample(F, off))), [F, off], [off]


def _displaced_sample(rng):
    F = _var(rng, (2, 4, 4), "F")
    flow = Variable(rng.uniform(-1.5, 1.5, size=(2, 4, 4)), name="flow")
    p = _probe(rng, (2, 4, 4))
    return (lambda: p(ops.displaced_sample(F, flow))), [F, flow], [flow]


def _channel_dot(rng):
    s, q = _var(rng, (3, 2, 3, 3), "samples"), _var(rng, (2, 3, 3), "query")
    p = _probe(rng, (3, 3, 3))
    return (lambda: p(ops.channel_dot(s, q))), [s, q], []


def _normalize(mode):
    def build(rng):
        # ratio weights need sums well away from zero
        low = 0.5 if mode == "ratio" else -2.0
        s = _var(rng, (4, 3, 3), "scores", low=low, high=2.0)
        p = _probe(rng, (4, 3, 3))
        return (lambda: p(ops.normalize_weights(s, mode))), [s], []
    return build


def _weighted_sum(rng):
    s, w = _var(rng, (3, 2, 3, 3), "samples"), _var(rng, (3, 3, 3), "weights")
    p = _probe(rng, (2, 3, 3))
    return (lambda: p(ops.weighted_sum(s, w))), [s, w], []


def _aggregate(rng):
    F = _var(rng, (3, 4, 4), "F")
    pts = _sampling_points(rng, 4, 4, 4)
    raw = _var(rng, (4,), "logits")
    p = _probe(rng, (3,))

    def f():
        w = ops.normalize_weights(ops.reshape(raw, (4, 1, 1)), "softmax")
        return p(ops.aggregate(F, pts, ops.reshape(w, (4,))))

    return f, [F, pts, raw], [pts]


def _softmax_streams(rng):
    a, b = _var(rng, (1, 3, 3), "s_a"), _var(rng, (1, 3, 3), "s_b")
    pa, pb = _probe(rng, (1, 3, 3)), _probe(rng, (1, 3, 3))

    def f():
        w_a, w_b = ops.softmax_over_streams([a, b])
        return ops.add(pa(w_a), pb(w_b))

    return f, [a, b], []


def _mse(rng):
    a, b = _var(rng, (2, 3, 3), "pred"), _var(rng, (2, 3, 3), "target")
    return (lambda: ops.mse_loss(a, b)), [a, b], []


def _conv(activation, k):
    def build(rng):
        x = _var(rng, (2, 4, 4), "x")
        spec = ops.ConvSpec.random(2, 3, k, rng, name="conv")
        spec.weight.name, spec.bias.name = "weight", "bias"
        spec.bias.value = rng.uniform(-0.5, 0.5, size=3)
        p = _probe(rng, (3, 4, 4))
        return (lambda: p(ops.conv2d(x, spec, activation))), [x, spec.weight, spec.bias], []
    return build


def _generic(rng, params):
    # zero-initialised biases put relu inputs exactly on the kink where the
    # two-sided difference is undefined; check at a generic point instead
    for v in params:
        v.value = rng.uniform(-0.5, 0.5, size=v.shape)
    return params


def _fuse(rng):
    a, b = _var(rng, (2, 3, 3), "a"), _var(rng, (2, 3, 3), "b")
    unit = AggregationUnit.build(2, rng, width_factor=1 / 64, zero_last=False)
    p = _probe(rng, (2, 3, 3))
    params = _generic(rng, unit.parameters())
    return (lambda: p(fuse(a, b, unit)[0])), [a, b] + params, []


def _transform(rng):
    x = _var(rng, (2, 3, 3), "low")
    unit = TransformUnit.build(2, 3, rng, width_factor=1 / 128)
    p = _probe(rng, (3, 3, 3))
    params = _generic(rng, unit.parameters())
    return (lambda: p(transform(x, unit))), [x] + params, []


def _propagate(mode):
    def build(rng):
        C, H, W, N = 4, 4, 4, 5
        F_t = _var(rng, (C, H, W), "F_t")
        F_tk = _var(rng, (C, H, W), "F_tk")
        # within one cell, so every position keeps some in-bounds support
        off = Variable(rng.uniform(-0.9, 0.9, size=(N, 2)), name="offsets")
        emb = EmbeddingPair.random(C, 2, rng)
        if mode == "ratio":
            # positive features and embeddings keep the score sums positive
            for v in (F_t, F_tk):
                v.value = np.abs(v.value) + 0.1
            for spec in (emb.f, emb.g):
                spec.weight.value = np.abs(spec.weight.value) + 0.1
        emb.f.weight.name, emb.g.weight.name = "f", "g"
        cfg = LstsConfig(n_samples=N, normalize=mode)
        p = _probe(rng, (C, H, W))
        inputs = [F_t, F_tk, off, emb.f.weight, emb.g.weight]
        return (lambda: p(propagate(F_t, F_tk, off, emb, cfg))), inputs, [off]
    return build


REGISTRY = {
    "add": _binary(ops.add),
    "add_bcast_channel": _binary(ops.add, shape_b=(2, 1, 1)),
    "sub": _binary(ops.sub, shape_b=(1, 3, 4)),
    "mul": _binary(ops.mul),
    "mul_bcast_spatial": _binary(ops.mul, shape_b=(1, 3, 4)),
    "scale": _unary(lambda a: ops.scale(a, -1.7)),
    "vsum": _unary(ops.vsum),
    "vsum_axis": _unary(lambda a: ops.vsum(a, axis=1)),
    "relu": _unary(ops.relu),
    "concat_channels": _binary(ops.concat_channels, shape_b=(3, 3, 4)),
    "stack": _stack,
    "take": _unary(lambda a: ops.take(a, (slice(None), slice(1, 3), 2))),
    "reshape": _unary(lambda a: ops.reshape(a, (6, 4))),
    "transpose": _unary(ops.transpose, shape=(3, 5)),
    "matmul": _matmul,
    "bilinear_sample": _bilinear_sample,
    "shifted_sample": _shifted_sample,
    "displaced_sample": _displaced_sample,
    "channel_dot": _channel_dot,
    "normalize_softmax": _normalize("softmax"),
    "normalize_ratio": _normalize("ratio"),
    "weighted_sum": _weighted_sum,
    "aggregate": _aggregate,
    "softmax_over_streams": _softmax_streams,
    "mse_loss": _mse,
    "conv2d_1x1": _conv("none", 1),
    "conv2d_3x3_relu": _conv("relu", 3),
    "fuse": _fuse,
    "transform": _transform,
    "propagate_softmax": _propagate("softmax"),
    "propagate_ratio": _propagate("ratio"),
}


def check_op(name, instances, seed, step, tol):
    """Worst case over ``instances`` random draws; returns (max_rel, checked, skipped)."""
    builder = REGISTRY[name]
    worst, checked, skipped = 0.0, 0, 0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        f, inputs, locations = builder(rng)
        report = grad_check(f, inputs, step=step, tol=tol, locations=locations)
        worst = max(worst, report.max_error)
        checked += sum(e.checked for e in report.entries)
        skipped += sum(e.skipped for e in report.entries)
    return worst, checked, skipped


def run_all(instances=20, seed=0, step=1e-5, tol=1e-4, names=None):
    """Yields one report line per op; the last element of each tuple is pass/fail."""
    for name in names or REGISTRY:
        t0 = time.perf_counter()
        worst, checked, skipped = check_op(name, instances, seed, step, tol)
        ok = worst <= tol
        line = (f"{name}: max_rel={worst:.3e} instances={instances} checked={checked} "
                f"skipped={skipped} {'PASS' if ok else 'FAIL'}")
        yield name, line, ok, time.perf_counter() - t0
