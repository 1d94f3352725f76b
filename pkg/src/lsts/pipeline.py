"""Keyframe/non-keyframe video feature pipeline and propagation baselines.

Keyframes go through the heavy extractor and the recursive memory update;
non-keyframes go through the light extractor, a lift to high-level width, and
aggregation with the memory propagated from the last keyframe.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autodiff import Variable, as_variable, no_grad
from .fusion import AggregationUnit, TransformUnit, fuse, fuse_fixed, transform
from .ops import ConvSpec
from .sampler import (EmbeddingPair, LstsConfig, OffsetSet, global_attention, init_offsets,
                      integer_grid, propagate)
from .tensor import ShapeError

MEMORY_MODES = ("none", "fixed", "quality")
DFA_MODES = ("none", "fixed", "quality")


@dataclass
class Schedule:
    interval: int = 10

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("keyframe interval must be positive")

    def is_keyframe(self, i: int) -> bool:
        return i % self.interval == 0

    def keyframes(self, T: int):
        return list(range(0, T, self.interval))

    def heavy_count(self, T: int) -> int:
        return math.ceil(T / self.interval)


# ---------------------------------------------------------------------------
# extractor stand-ins
# ---------------------------------------------------------------------------

def _he_conv(c_in, c_out, k, rng, gain):
    # variance-preserving init so fixed random features stay O(1)
    bound = math.sqrt(3.0 * gain / (c_in * k * k))
    return ConvSpec(Variable(rng.uniform(-bound, bound, size=(c_out, c_in, k, k))),
                    Variable(np.zeros(c_out)))


@dataclass
class Extractors:
    """Fixed random convolution stacks.

    ``light`` is one 3x3 layer to ``c_low`` channels.  ``heavy`` runs the same
    layer followed by two more (``c_low -> hidden -> c_high``), so the light
    features are a prefix of the heavy computation.
    """

    stem: ConvSpec
    body: ConvSpec
    head: ConvSpec

    @classmethod
    def build(cls, c_img, c_low, c_high, hidden, seed):
        if not c_low < c_high:
            raise ValueError("light features must have fewer channels than heavy ones")
        rng = np.random.default_rng(seed)
        return cls(_he_conv(c_img, c_low, 3, rng, 2.0),
                   _he_conv(c_low, hidden, 3, rng, 2.0),
                   _he_conv(hidden, c_high, 3, rng, 1.0))

    @property
    def c_low(self):
        return self.stem.out_channels

    @property
    def c_high(self):
        return self.head.out_channels

    def light(self, frame) -> np.ndarray:
        with no_grad():
            return ops.conv2d(frame, self.stem, "relu").value

    def heavy(self, frame) -> np.ndarray:
        with no_grad():
            h = ops.conv2d(frame, self.stem, "relu")
            h = ops.conv2d(h, self.body, "relu")
            return ops.conv2d(h, self.head).value


# ---------------------------------------------------------------------------
# pipeline parameters and state
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    memory_update: str = "quality"
    dfa: str = "quality"
    transform: bool = True
    task_mode: str = "fused"  # or "memory": keyframe task is the updated memory
    share_srfu_agg: bool = True
    interval: int = 10
    width_factor: float = 1.0 / 16
    lsts: LstsConfig = field(default_factory=LstsConfig)

    def __post_init__(self):
        if self.memory_update not in MEMORY_MODES:
            raise ValueError(f"memory_update must be one of {MEMORY_MODES}")
        if self.dfa not in DFA_MODES:
            raise ValueError(f"dfa must be one of {DFA_MODES}")
        if self.task_mode not in ("fused", "memory"):
            raise ValueError("task_mode must be 'fused' or 'memory'")


@dataclass
class LstsBranch:
    offsets: OffsetSet
    emb: EmbeddingPair

    def parameters(self):
        params = [self.offsets.param] if self.offsets.trainable else []
        return params + self.emb.parameters()


@dataclass
class PipelineParams:
    config: PipelineConfig
    lsts_srfu: LstsBranch
    lsts_dfa: LstsBranch
    agg_srfu: AggregationUnit
    agg_srfu_task: AggregationUnit
    agg_dfa: AggregationUnit
    transform: TransformUnit
    adapter: ConvSpec  # 1x1 lift used when the transform unit is switched off

    @classmethod
    def build(cls, config: PipelineConfig, c_low, c_high, seed):
        rng = np.random.default_rng(seed)
        ce = config.lsts.embed_width(c_high)
        srfu = LstsBranch(init_offsets(config.lsts, seed + 1),
                          EmbeddingPair.random(c_high, ce, rng))
        dfa = LstsBranch(init_offsets(config.lsts, seed + 2),
                         EmbeddingPair.random(c_high, ce, rng))
        agg = AggregationUnit.build(c_high, rng, config.width_factor)
        agg_task = agg if config.share_srfu_agg else AggregationUnit.build(
            c_high, rng, config.width_factor)
        return cls(config, srfu, dfa, agg, agg_task,
                   AggregationUnit.build(c_high, rng, config.width_factor),
                   TransformUnit.build(c_low, c_high, rng, config.width_factor),
                   ConvSpec.random(c_low, c_high, 1, rng, name="adapter"))

    def parameters(self):
        """Parameters that influence the output under the current config."""
        cfg = self.config
        params = list(self.lsts_dfa.parameters())
        params += self.transform.parameters() if cfg.transform else self.adapter.parameters()
        if cfg.memory_update != "none":
            params += self.lsts_srfu.parameters()
        if cfg.memory_update == "quality":
            params += self.agg_srfu.parameters()
            if self.agg_srfu_task is not self.agg_srfu and cfg.task_mode == "fused":
                params += self.agg_srfu_task.parameters()
        if cfg.dfa == "quality":
            params += self.agg_dfa.parameters()
        return params


@dataclass
class PipelineState:
    params: PipelineParams
    memory: object = None  # Variable or None before the first keyframe
    last_key: int = -1


def _blend(a, b, mode, unit):
    if mode == "fixed":
        return fuse_fixed(a, b)
    return fuse(a, b, unit)[0]


def srfu_step(state: PipelineState, F_key, index: int = None):
    """Update the keyframe memory with a new keyframe feature.

    Returns ``(task, new_state)``.
    """
    p = state.params
    cfg = p.config
    F_key = as_variable(F_key)
    if F_key.value.ndim != 3 or F_key.shape[0] != p.transform.out_channels:
        raise ShapeError(f"keyframe feature has shape {F_key.shape}")
    index = state.last_key + cfg.interval if index is None else index
    if state.memory is None or cfg.memory_update == "none":
        return F_key, replace(state, memory=F_key, last_key=index)
    if state.memory.shape != F_key.shape:
        raise ShapeError(f"memory {state.memory.shape} vs keyframe {F_key.shape}")
    align = propagate(state.memory, F_key, p.lsts_srfu.offsets, p.lsts_srfu.emb, cfg.lsts)
    memory = _blend(F_key, align, cfg.memory_update, p.agg_srfu)
    if cfg.task_mode == "memory":
        task = memory
    else:
        task = _blend(memory, F_key, cfg.memory_update, p.agg_srfu_task)
    return task, replace(state, memory=memory, last_key=index)


def high_estimate(params: PipelineParams, F_low):
    if params.config.transform:
        return transform(F_low, params.transform)
    return ops.conv2d(F_low, params.adapter)


def dfa_step(state: PipelineState, F_low):
    """Task feature for a non-keyframe from its low-level feature."""
    if state.memory is None:
        raise ValueError("no keyframe memory yet; the first frame must be a keyframe")
    p = state.params
    cfg = p.config
    high = high_estimate(p, F_low)
    if high.shape != state.memory.shape:
        raise ShapeError(f"high-level estimate {high.shape} vs memory {state.memory.shape}")
    align = propagate(state.memory, high, p.lsts_dfa.offsets, p.lsts_dfa.emb, cfg.lsts)
    if cfg.dfa == "none":
        return align
    return _blend(align, high, cfg.dfa, p.agg_dfa)


@dataclass
class FrameRecord:
    frame: int
    index_type: str
    mse: float
    ops: int
    ms: float

    def format(self, timing=True) -> str:
        ms = f"{self.ms:.3f}" if timing else "nan"
        return f"{self.frame},{self.index_type},{self.mse!r},{self.ops},{ms}"


FRAME_HEADER = "frame,index_type,mse,ops,ms"


def run_sequence(frames, extractors: Extractors, schedule: Schedule, state: PipelineState,
                 oracle=None):
    """Process every frame; returns ``(tasks, records, final_state)``.

    ``oracle`` (optional, same length as ``frames``) supplies reference
    high-level features for the per-frame MSE column.
    """
    if len(frames) == 0:
        raise ValueError("empty frame list")
    tasks, records = [], []
    with no_grad():
        for i, frame in enumerate(frames):
            t0 = time.perf_counter()
            with ops.count_ops() as counter:
                if schedule.is_keyframe(i):
                    task, state = srfu_step(state, extractors.heavy(frame), index=i)
                    kind = "key"
                else:
                    task = dfa_step(state, extractors.light(frame))
                    kind = "nonkey"
            ms = (time.perf_counter() - t0) * 1e3
            value = task.value
            mse = float(np.mean((value - oracle[i]) ** 2)) if oracle is not None else float("nan")
            tasks.append(value)
            records.append(FrameRecord(i, kind, mse, counter.total, ms))
    return tasks, records, state


# ---------------------------------------------------------------------------
# propagation baselines
# ---------------------------------------------------------------------------

def flow_warp_baseline(F_t, flow):
    """Backward warp: output(p0) = F_t sampled at p0 + flow(p0)."""
    F_t = np.asarray(F_t, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != (2,) + F_t.shape[1:]:
        raise ShapeError(f"flow shape {flow.shape} does not match features {F_t.shape}")
    with no_grad():
        return ops.displaced_sample(F_t, flow).value


def matchtrans_baseline(F_t, F_tk, emb: EmbeddingPair, radius: int = 4, normalize="softmax"):
    """Attention over the fixed integer neighbourhood of half-width ``radius``."""
    grid = OffsetSet.from_array(integer_grid(radius), init="grid", trainable=False)
    cfg = LstsConfig(n_samples=len(grid), normalize=normalize)
    return propagate(F_t, F_tk, grid, emb, cfg)


def nonlocal_baseline(F_t, F_tk, emb: EmbeddingPair):
    """Global attention over every source position."""
    return global_attention(F_t, F_tk, emb)
