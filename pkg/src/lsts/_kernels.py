"""Bilinear gather/scatter kernels.

Two interchangeable implementations live here: numba ``@njit`` loops and a
vectorised numpy path.  ``LSTS_DISABLE_NUMBA=1`` in the environment (or a
missing numba install) selects the numpy path at import time.

Sampling convention: a point ``(x, y)`` reads the field at column ``x`` and
row ``y``.  Grid cells outside ``[0, W-1] x [0, H-1]`` read as zero.  At
integer coordinates the derivative is the right-derivative, which falls out
of using ``floor`` to pick the left/top neighbour.
"""

import os

import numpy as np

_FLAG = os.environ.get("LSTS_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("1", "true", "yes", "on")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and NUMBA_REQUESTED


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _corners(xs, ys, H, W):
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, dx, w in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        flat = np.where(valid, yi * W + xi, 0)
        out.append((flat, valid, w))
    return out, fx, fy


def sample_numpy(F, xs, ys):
    """Sample ``F`` (C, H, W) at M points; returns (C, M)."""
    C, H, W = F.shape
    flatF = F.reshape(C, H * W)
    corners, _, _ = _corners(xs, ys, H, W)
    out = np.zeros((C, xs.shape[0]))
    for flat, valid, w in corners:
        out += flatF[:, flat] * np.where(valid, w, 0.0)
    return out


def sample_backward_numpy(F, xs, ys, upstream):
    """Gradients of ``sum(upstream * sample(F, xs, ys))``.

    Returns ``(dF, dxs, dys)`` with shapes ``F.shape``, ``(M,)``, ``(M,)``.
    """
    C, H, W = F.shape
    M = xs.shape[0]
    flatF = F.reshape(C, H * W)
    corners, fx, fy = _corners(xs, ys, H, W)
    vals = []
    dF = np.zeros(C * H * W)
    chan = (np.arange(C) * (H * W))[:, None]
    for flat, valid, w in corners:
        v = flatF[:, flat] * valid
        vals.append(v)
        contrib = upstream * np.where(valid, w, 0.0)
        dF += np.bincount((chan + flat[None, :]).ravel(), weights=contrib.ravel(),
                          minlength=C * H * W)
    v00, v01, v10, v11 = vals
    gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    dxs = np.einsum("cm,cm->m", upstream, gx) if M else np.zeros(0)
    dys = np.einsum("cm,cm->m", upstream, gy) if M else np.zeros(0)
    return dF.reshape(C, H, W), dxs, dys


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _sample_nb(F, xs, ys):
        C, H, W = F.shape
        M = xs.shape[0]
        out = np.zeros((C, M))
        for m in range(M):
            xf = np.floor(xs[m])
            yf = np.floor(ys[m])
            fx = xs[m] - xf
            fy = ys[m] - yf
            x0 = int(xf)
            y0 = int(yf)
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi >= H:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi >= W:
                        continue
                    w = wy * (fx if dx == 1 else 1.0 - fx)
                    for c in range(C):
                        out[c, m] += w * F[c, yi, xi]
        return out

    @njit(cache=True)
    def _sample_backward_nb(F, xs, ys, upstream):
        C, H, W = F.shape
        M = xs.shape[0]
        dF = np.zeros((C, H, W))
        dxs = np.zeros(M)
        dys = np.zeros(M)
        for m in range(M):
            xf = np.floor(xs[m])
            yf = np.floor(ys[m])
            fx = xs[m] - xf
            fy = ys[m] - yf
            x0 = int(xf)
            y0 = int(yf)
            in_x0 = 0 <= x0 < W
            in_x1 = 0 <= x0 + 1 < W
            in_y0 = 0 <= y0 < H
            in_y1 = 0 <= y0 + 1 < H
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            gx = 0.0
            gy = 0.0
            for c in range(C):
                u = upstream[c, m]
                v00 = F[c, y0, x0] if (in_y0 and in_x0) else 0.0
                v01 = F[c, y0, x0 + 1] if (in_y0 and in_x1) else 0.0
                v10 = F[c, y0 + 1, x0] if (in_y1 and in_x0) else 0.0
                v11 = F[c, y0 + 1, x0 + 1] if (in_y1 and in_x1) else 0.0
                gx += u * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                gy += u * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))
                if in_y0 and in_x0:
                    dF[c, y0, x0] += u * w00
                if in_y0 and in_x1:
                    dF[c, y0, x0 + 1] += u * w01
                if in_y1 and in_x0:
                    dF[c, y0 + 1, x0] += u * w10
                if in_y1 and in_x1:
                    dF[c, y0 + 1, x0 + 1] += u * w11
            dxs[m] = gx
            dys[m] = gy
        return dF, dxs, dys

    def sample_numba(F, xs, ys):
        return _sample_nb(F, xs, ys)

    def sample_backward_numba(F, xs, ys, upstream):
        return _sample_backward_nb(F, xs, ys, upstream)

else:  # pragma: no cover
    sample_numba = sample_numpy
    sample_backward_numba = sample_backward_numpy


def _prep(F, xs, ys):
    return (np.ascontiguousarray(F, dtype=np.float64),
            np.ascontiguousarray(xs, dtype=np.float64).ravel(),
            np.ascontiguousarray(ys, dtype=np.float64).ravel())


def sample(F, xs, ys):
    F, xs, ys = _prep(F, xs, ys)
    if USE_NUMBA:
        return sample_numba(F, xs, ys)
    return sample_numpy(F, xs, ys)


def sample_backward(F, xs, ys, upstream):
    F, xs, ys = _prep(F, xs, ys)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if USE_NUMBA:
        return sample_backward_numba(F, xs, ys, upstream)
    return sample_backward_numpy(F, xs, ys, upstream)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
