"""Training loops and the desk-scale comparison experiments."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import ops, synth
from ..autodiff import Variable, backward, no_grad, sgd_step
from ..pipeline import (Extractors, PipelineConfig, PipelineParams, PipelineState, Schedule,
                        dfa_step, flow_warp_baseline, matchtrans_baseline, nonlocal_baseline,
                        run_sequence, srfu_step)
from ..sampler import EmbeddingPair, LstsConfig, OffsetSet, init_offsets, propagate
from .config import ExperimentConfig

EVAL_SEED_OFFSET = 1000


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def lsts_config(cfg: ExperimentConfig, **overrides) -> LstsConfig:
    kw = dict(n_samples=cfg.n_samples, init=cfg.init, normalize=cfg.normalize,
              embed_channels=cfg.embed_channels, radius=cfg.radius)
    kw.update(overrides)
    return LstsConfig(**kw)


def build_extractors(cfg: ExperimentConfig) -> Extractors:
    return Extractors.build(cfg.c_img, cfg.c_low, cfg.c_high, cfg.heavy_hidden, cfg.seed + 7)


def make_sequence(cfg: ExperimentConfig, seed_offset=0, frames=None, sigma=None, motion=None):
    T = cfg.frames if frames is None else frames
    sigma = cfg.sigma if sigma is None else sigma
    seed = cfg.seed + seed_offset
    mean = (cfg.motion_dx, cfg.motion_dy) if motion is None else motion
    if cfg.motion_std > 0:
        steps = synth.random_motion(T, mean, cfg.motion_std, seed=seed + 500)
    else:
        steps = mean
    return synth.generate(T, (cfg.c_img, cfg.height, cfg.width), steps, cfg.pattern, sigma, seed)


def heavy_features(ext: Extractors, frames) -> np.ndarray:
    return np.stack([ext.heavy(f) for f in frames])


def light_features(ext: Extractors, frames) -> np.ndarray:
    return np.stack([ext.light(f) for f in frames])


def embedding(cfg: ExperimentConfig) -> EmbeddingPair:
    ce = lsts_config(cfg).embed_width(cfg.c_high)
    return EmbeddingPair.random(cfg.c_high, ce, np.random.default_rng(cfg.seed + 3))


def interior(v, margin):
    if margin == 0:
        return v
    return ops.take(v, (slice(None), slice(margin, -margin), slice(margin, -margin)))


def pair_indices(T, gap):
    return [(t, t + gap) for t in range(T - gap)]


# ---------------------------------------------------------------------------
# offset training
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    loss: float
    mean_dx: float
    mean_dy: float
    distance: float

    HEADER = "step,loss,mean_dx,mean_dy,distance"

    def format(self) -> str:
        return f"{self.step},{self.loss!r},{self.mean_dx!r},{self.mean_dy!r},{self.distance!r}"


@dataclass
class TrainResult:
    offsets: OffsetSet
    initial: np.ndarray
    emb: EmbeddingPair
    records: list
    sequence: synth.SyntheticSequence
    target: np.ndarray
    lsts: LstsConfig = None

    @property
    def final_distance(self) -> float:
        return float(np.linalg.norm(self.offsets.mean() - self.target))


def train_offsets(cfg: ExperimentConfig, init=None, trainable=None, on_record=None,
                  data=None) -> TrainResult:
    """Fit offsets (and optionally embeddings) by reconstructing ``F_{t+gap}``.

    The loss is the mean squared error over interior cells, ``loss_margin``
    cells away from the border, where zero padding would bias the fit.
    """
    trainable = cfg.trainable if trainable is None else trainable
    lcfg = lsts_config(cfg, init=init or cfg.init)
    if data is None:
        seq = make_sequence(cfg)
        feats = heavy_features(build_extractors(cfg), seq.frames)
    else:
        seq, feats = data
    offsets = init_offsets(lcfg, cfg.seed, trainable=trainable)
    initial = offsets.values.copy()
    emb = embedding(cfg)
    params = ([offsets.param] if trainable else [])
    if cfg.train_embeddings:
        params += emb.parameters()
    else:
        for p in emb.parameters():
            p.requires_grad = False
    pairs = pair_indices(len(seq), cfg.gap)
    target = seq.motion[: cfg.gap].sum(axis=0) if cfg.motion_std == 0 else \
        seq.motion.mean(axis=0) * cfg.gap
    records = []
    steps = cfg.steps if params else 0
    for step in range(steps):
        t, tk = pairs[step % len(pairs)]
        pred = propagate(feats[t], feats[tk], offsets, emb, lcfg)
        loss = ops.mse_loss(interior(pred, cfg.loss_margin),
                            interior(Variable(feats[tk]), cfg.loss_margin))
        value = float(loss.value.ravel()[0])
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step}")
        backward(loss)
        mean = offsets.mean()
        rec = MetricsRecord(step, value, float(mean[0]), float(mean[1]),
                            float(np.linalg.norm(mean - target)))
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        sgd_step(params, cfg.lr_at(step))
    if not np.all(np.isfinite(offsets.values)):
        raise DivergenceError("offsets became non-finite")
    return TrainResult(offsets, initial, emb, records, seq, target, lcfg)


def propagation_mse(cfg: ExperimentConfig, feats, method) -> float:
    """Mean interior MSE of ``method(F_t, F_tk)`` over all gap-separated pairs."""
    m = cfg.loss_margin
    errs = []
    with no_grad():
        for t, tk in pair_indices(len(feats), cfg.gap):
            out = _value(method(feats[t], feats[tk], t, tk))
            diff = out - feats[tk]
            if m:
                diff = diff[:, m:-m, m:-m]
            errs.append(np.mean(diff ** 2))
    return float(np.mean(errs))


def _value(x):
    return x.value if isinstance(x, Variable) else np.asarray(x)


# ---------------------------------------------------------------------------
# method comparison (initialisations and propagation methods)
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    group: str
    name: str
    mse: float
    ops: int
    ms: float

    HEADER = "group,config,mse,ops,ms"

    def format(self, timing=True) -> str:
        ms = f"{self.ms:.3f}" if timing else "nan"
        return f"{self.group},{self.name},{self.mse!r},{self.ops},{ms}"


def _measure(cfg, feats, method):
    t0 = time.perf_counter()
    with ops.count_ops() as counter:
        mse = propagation_mse(cfg, feats, method)
    n = len(pair_indices(len(feats), cfg.gap))
    return mse, counter.total // n, (time.perf_counter() - t0) * 1e3 / n


def compare_methods(cfg: ExperimentConfig):
    """Rows for learned/fixed offsets under both inits, MatchTrans, Non-Local
    and flow warping with ground-truth motion, all scored on a held-out
    sequence.  Returns ``(rows, trained)`` where ``trained`` maps init name
    to its :class:`TrainResult`."""
    ext = build_extractors(cfg)
    train_seq = make_sequence(cfg)
    train_feats = heavy_features(ext, train_seq.frames)
    eval_seq = make_sequence(cfg, seed_offset=EVAL_SEED_OFFSET)
    feats = heavy_features(ext, eval_seq.frames)
    emb = embedding(cfg)
    rows, trained = [], {}
    for init in ("gaussian", "uniform"):
        res = train_offsets(cfg, init=init, trainable=True, data=(train_seq, train_feats))
        trained[init] = res
        for label, off in (("learned", res.offsets.values), ("fixed", res.initial)):
            fn = (lambda a, b, t, tk, off=off, lc=res.lsts:
                  propagate(a, b, off, res.emb, lc))
            mse, n_ops, ms = _measure(cfg, feats, fn)
            rows.append(AblationRow("init", f"lsts-{init}-{label}", mse, n_ops, ms))
    radius = int(round(cfg.radius))
    for name, fn in (
        ("lsts", lambda a, b, t, tk: propagate(a, b, trained[cfg.init].offsets.values, emb,
                                                trained[cfg.init].lsts)),
        ("matchtrans", lambda a, b, t, tk: matchtrans_baseline(a, b, emb, radius, cfg.normalize)),
        ("nonlocal", lambda a, b, t, tk: nonlocal_baseline(a, b, emb)),
        ("flowwarp-gt", lambda a, b, t, tk: flow_warp_baseline(a, synth.gt_flow(eval_seq, t, tk - t))),
    ):
        mse, n_ops, ms = _measure(cfg, feats, fn)
        rows.append(AblationRow("method", name, mse, n_ops, ms))
    return rows, trained


# ---------------------------------------------------------------------------
# component ladder
# ---------------------------------------------------------------------------

LADDER = (
    ("a", "sparse", dict(memory_update="none", dfa="none", transform=False)),
    ("b", "memory-update", dict(memory_update="fixed", dfa="none", transform=False)),
    ("c", "quality-memory", dict(memory_update="quality", dfa="none", transform=False)),
    ("d", "dfa-aggregation", dict(memory_update="quality", dfa="fixed", transform=False)),
    ("e", "transform", dict(memory_update="quality", dfa="fixed", transform=True)),
    ("f", "quality-dfa-no-transform", dict(memory_update="quality", dfa="quality",
                                           transform=False)),
    ("g", "quality-dfa", dict(memory_update="quality", dfa="quality", transform=True)),
)
LADDER_CHAIN = ("a", "b", "c", "d", "e", "g")


@dataclass
class LadderData:
    heavy: list
    light: list
    oracle: list


def ladder_data(cfg: ExperimentConfig, ext: Extractors, seed_offsets):
    out = LadderData([], [], [])
    for off in seed_offsets:
        seq = make_sequence(cfg, seed_offset=off, frames=cfg.ladder_frames, sigma=cfg.ladder_sigma,
                            motion=(cfg.ladder_motion_dx, cfg.ladder_motion_dy))
        out.heavy.append(heavy_features(ext, seq.frames))
        out.light.append(light_features(ext, seq.frames))
        out.oracle.append(heavy_features(ext, seq.clean))
    return out


def _memory_before(params, heavy, keys):
    state = PipelineState(params)
    with no_grad():
        for k in keys:
            _, state = srfu_step(state, heavy[k], index=k)
    if state.memory is not None:
        state.memory = Variable(state.memory.value)
    return state


def train_pipeline(params: PipelineParams, data: LadderData, cfg: ExperimentConfig):
    """Truncated training: one keyframe update plus one following
    non-keyframe per step, with the earlier memory held fixed."""
    plist = params.parameters()
    if not plist or cfg.ladder_steps == 0:
        return []
    # offsets live in cell units and take the sampler's step size; the
    # network weights take the smaller pipeline one
    offs = [p for p in plist if any(p is b.offsets.param for b in (params.lsts_srfu, params.lsts_dfa))]
    nets = [p for p in plist if not any(p is o for o in offs)]
    sched = Schedule(params.config.interval)
    rng = np.random.default_rng(cfg.seed + 11)
    losses = []
    for step in range(cfg.ladder_steps):
        s = int(rng.integers(len(data.heavy)))
        heavy, light, oracle = data.heavy[s], data.light[s], data.oracle[s]
        T = len(heavy)
        keys = sched.keyframes(T)
        ki = int(rng.integers(len(keys)))
        j = keys[ki]
        state = _memory_before(params, heavy, keys[:ki])
        task, state = srfu_step(state, heavy[j], index=j)
        loss = ops.mse_loss(task, oracle[j])
        block = list(range(j + 1, min(j + sched.interval, T)))
        if block:
            t = block[int(rng.integers(len(block)))]
            loss = ops.add(loss, ops.mse_loss(dfa_step(state, light[t]), oracle[t]))
        value = float(loss.value.ravel()[0])
        if not math.isfinite(value):
            raise DivergenceError(f"pipeline loss became {value} at step {step}")
        losses.append(value)
        backward(loss)
        sgd_step(offs, cfg.lr_at(step, cfg.ladder_steps, cfg.lr))
        sgd_step(nets, cfg.lr_at(step, cfg.ladder_steps, cfg.ladder_lr))
    return losses


def evaluate_pipeline(params, data: LadderData, ext: Extractors, frames_list, interval):
    records = []
    for frames, oracle in zip(frames_list, data.oracle):
        _, recs, _ = run_sequence(frames, ext, Schedule(interval), PipelineState(params), oracle)
        records.append(recs)
    return records


def run_ladder(cfg: ExperimentConfig, names=None):
    """Train and score each ladder configuration; returns ``(rows, frame_records)``.

    ``frame_records`` maps a configuration label to the per-frame records of
    the first evaluation sequence.
    """
    ext = build_extractors(cfg)
    train = ladder_data(cfg, ext, [100 + i for i in range(cfg.ladder_train_sequences)])
    eval_offsets = [EVAL_SEED_OFFSET + 100 + i for i in range(2)]
    evald = ladder_data(cfg, ext, eval_offsets)
    eval_frames = [make_sequence(cfg, seed_offset=o, frames=cfg.ladder_frames,
                                 sigma=cfg.ladder_sigma,
                                 motion=(cfg.ladder_motion_dx, cfg.ladder_motion_dy)).frames
                   for o in eval_offsets]
    rows, frames_out = [], {}
    for label, name, flags in LADDER:
        if names is not None and label not in names:
            continue
        pcfg = PipelineConfig(interval=cfg.interval, width_factor=cfg.width_factor,
                              lsts=lsts_config(cfg), **flags)
        params = PipelineParams.build(pcfg, cfg.c_low, cfg.c_high, cfg.seed + 21)
        t0 = time.perf_counter()
        train_pipeline(params, train, cfg)
        recs = evaluate_pipeline(params, evald, ext, eval_frames, cfg.interval)
        flat = [r for seq_recs in recs for r in seq_recs]
        mse = float(np.mean([r.mse for r in flat]))
        n_ops = int(np.mean([r.ops for r in flat]))
        ms = float(np.mean([r.ms for r in flat]))
        rows.append(AblationRow("ladder", f"{label}-{name}", mse, n_ops, ms))
        frames_out[label] = recs[0]
    return rows, frames_out
