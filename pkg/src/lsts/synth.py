"""Synthetic video with known global motion.

Frames are samples of a smooth analytic field.  Frame ``t`` reads the field
at ``p + D_t``, where ``D_t`` is the cumulative displacement of the first
``t`` steps, so ``frame[t+1](p) == frame[t](p + motion[t])`` holds exactly
wherever both sides are defined.  This is the same backward-warping
convention used by the flow-warp baseline and by the offsets of the sampler.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import format_tensor, parse_tensor

PATTERNS = ("smooth-noise", "moving-blobs")
BIN_WIDTH = 0.25
BIN_RANGE = 8.0


@dataclass
class SyntheticSequence:
    frames: np.ndarray  # (T, C, H, W), noisy
    clean: np.ndarray  # (T, C, H, W), before noise
    motion: np.ndarray  # (T-1, 2) per-step (dx, dy)
    pattern: str
    sigma: float
    seed: int

    def __len__(self):
        return self.frames.shape[0]

    @property
    def displacement(self) -> np.ndarray:
        """Cumulative displacement ``D_t`` for every frame, shape (T, 2)."""
        return np.vstack([np.zeros((1, 2)), np.cumsum(self.motion, axis=0)])


def _motion_array(motion, T):
    arr = np.asarray(motion, dtype=np.float64)
    if arr.shape == (2,):
        return np.tile(arr, (max(T - 1, 0), 1))
    if arr.shape != (max(T - 1, 0), 2):
        raise ValueError(f"motion must be (dx, dy) or shape ({T - 1}, 2), got {arr.shape}")
    return arr.copy()


def random_motion(T, mean=(0.0, 0.0), std=1.0, seed=0) -> np.ndarray:
    """Per-step motions drawn i.i.d. from N(mean, std^2 I)."""
    rng = np.random.default_rng(seed)
    return np.asarray(mean, dtype=np.float64) + std * rng.standard_normal((max(T - 1, 0), 2))


class _SmoothNoise:
    def __init__(self, channels, rng, modes=16, wavelengths=(10.0, 24.0)):
        lam = rng.uniform(*wavelengths, size=(channels, modes))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(channels, modes))
        k = 2.0 * np.pi / lam
        self.kx = k * np.cos(theta)
        self.ky = k * np.sin(theta)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(channels, modes))
        self.amp = rng.standard_normal((channels, modes)) * np.sqrt(2.0 / modes)

    def __call__(self, x, y):
        arg = (self.kx[:, :, None, None] * x + self.ky[:, :, None, None] * y
               + self.phase[:, :, None, None])
        return np.einsum("cm,cmhw->chw", self.amp, np.cos(arg))


class _Blobs:
    def __init__(self, channels, rng, H, W, density=0.02, margin=48.0):
        area = (W + 2 * margin) * (H + 2 * margin)
        n = max(1, int(density * area))
        self.cx = rng.uniform(-margin, W + margin, size=n)
        self.cy = rng.uniform(-margin, H + margin, size=n)
        self.r = rng.uniform(1.5, 3.5, size=n)
        self.amp = rng.uniform(-1.0, 1.0, size=(channels, n)) * 1.5

    def __call__(self, x, y):
        d2 = (x[None] - self.cx[:, None, None]) ** 2 + (y[None] - self.cy[:, None, None]) ** 2
        g = np.exp(-0.5 * d2 / self.r[:, None, None] ** 2)
        return np.einsum("cn,nhw->chw", self.amp, g)


def generate(T, shape, motion=(0.0, 0.0), pattern="smooth-noise", sigma=0.0, seed=0):
    """Build a deterministic sequence of ``T`` frames of ``shape`` (C, H, W).

    ``motion`` is a constant (dx, dy) or an array of per-step displacements.
    Noise is i.i.d. uniform in [-sigma, sigma], added after translation.
    """
    if T < 1:
        raise ValueError("a sequence needs at least one frame")
    C, H, W = (int(s) for s in shape)
    if min(C, H, W) < 1:
        raise ValueError(f"invalid frame shape {shape}")
    if pattern not in PATTERNS:
        raise ValueError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
    rng = np.random.default_rng(seed)
    field = _SmoothNoise(C, rng) if pattern == "smooth-noise" else _Blobs(C, rng, H, W)
    steps = _motion_array(motion, T)
    disp = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    clean = np.stack([field(xs + d[0], ys + d[1]) for d in disp])
    noise = rng.uniform(-sigma, sigma, size=clean.shape) if sigma > 0 else 0.0
    return SyntheticSequence(clean + noise, clean, steps, pattern, float(sigma), seed)


def gt_flow(seq: SyntheticSequence, t: int, k: int) -> np.ndarray:
    """Constant (2, H, W) flow from frame ``t`` to frame ``t + k``."""
    T = len(seq)
    if t < 0 or k < 0 or t + k >= T:
        raise IndexError(f"frames {t} and {t + k} are not both in a sequence of {T}")
    d = seq.motion[t:t + k].sum(axis=0) if k else np.zeros(2)
    _, _, H, W = seq.frames.shape
    return np.broadcast_to(d[:, None, None], (2, H, W)).copy()


def bin_centers(width=BIN_WIDTH, span=BIN_RANGE) -> np.ndarray:
    n = int(round(2 * span / width))
    return np.linspace(-span, span, n + 1)


def histogram(values, width=BIN_WIDTH, span=BIN_RANGE) -> np.ndarray:
    """Counts over bins centred on multiples of ``width`` in [-span, span];
    out-of-range values land in the end bins so total mass is preserved."""
    centers = bin_centers(width, span)
    v = np.asarray(values, dtype=np.float64).ravel()
    idx = np.clip(np.floor((v + span) / width + 0.5).astype(np.int64), 0, centers.size - 1)
    return np.bincount(idx, minlength=centers.size).astype(np.int64)


def motion_histogram(seq: SyntheticSequence):
    """Per-axis histograms of the per-step displacements: (centers, dx, dy)."""
    if len(seq) < 2:
        raise ValueError("need at least two frames for a motion histogram")
    return bin_centers(), histogram(seq.motion[:, 0]), histogram(seq.motion[:, 1])


def histogram_intersection(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return 0.0
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())


# -- serialisation ----------------------------------------------------------------

def write_motion_csv(path, motion) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "dx", "dy"])
        for t, (dx, dy) in enumerate(np.asarray(motion).reshape(-1, 2)):
            w.writerow([t, repr(float(dx)), repr(float(dy))])


def read_motion_csv(path) -> np.ndarray:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["t", "dx", "dy"]:
        raise ValueError(f"{path}: expected header 't,dx,dy'")
    try:
        data = [(float(r[1]), float(r[2])) for r in rows[1:] if r]
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed motion row") from exc
    return np.array(data, dtype=np.float64).reshape(-1, 2)


def save_sequence(seq: SyntheticSequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        (d / f"frame_{t:04d}.txt").write_text(format_tensor(frame))
    write_motion_csv(d / "motion.csv", seq.motion)


def load_sequence(directory):
    """Read back frames and motion; returns ``(frames, motion)``."""
    d = Path(directory)
    files = sorted(d.glob("frame_*.txt"))
    if not files:
        raise FileNotFoundError(f"no frame files in {d}")
    frames = np.stack([parse_tensor(f.read_text()) for f in files])
    return frames, read_motion_csv(d / "motion.csv")
