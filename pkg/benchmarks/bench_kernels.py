"""Numba vs numpy bilinear kernels.

Times the forward gather and the backward scatter of both backends on the
same inputs and checks that they agree.  Run with ``python
benchmarks/bench_kernels.py [--repeat N]``; the backend env flag is ignored
here since both paths are called directly.
"""

import argparse
import time

import numpy as np

from lsts import _kernels as K

SIZES = [(16, 32, 32, 9), (16, 64, 64, 9), (64, 64, 64, 25)]


def _inputs(C, H, W, N, seed=0):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((C, H, W))
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    off = rng.normal(0.0, 1.5, size=(N, 2))
    px = (xs[None] + off[:, 0, None, None]).ravel()
    py = (ys[None] + off[:, 1, None, None]).ravel()
    up = rng.standard_normal((C, px.size))
    return F, px, py, up


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    # warm the jit cache outside the timed region
    F, px, py, up = _inputs(2, 4, 4, 1)
    K.sample_numba(F, px, py)
    K.sample_backward_numba(F, px, py, up)

    print(f"{'C,H,W,N':>14} {'kernel':>9} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} "
          f"{'max diff':>9}")
    for C, H, W, N in SIZES:
        F, px, py, up = _inputs(C, H, W, N)
        for kind in ("forward", "backward"):
            if kind == "forward":
                f_np = lambda: K.sample_numpy(F, px, py)
                f_nb = lambda: K.sample_numba(F, px, py)
                diff = np.abs(f_np() - f_nb()).max()
            else:
                f_np = lambda: K.sample_backward_numpy(F, px, py, up)
                f_nb = lambda: K.sample_backward_numba(F, px, py, up)
                diff = max(np.abs(a - b).max() for a, b in zip(f_np(), f_nb()))
            t_np, t_nb = _best(f_np, args.repeat), _best(f_nb, args.repeat)
            print(f"{f'{C},{H},{W},{N}':>14} {kind:>9} {t_np:10.3f} {t_nb:10.3f} "
                  f"{t_np / t_nb:7.1f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
