import numpy as np
import pytest

from lsts import ops
from lsts.autodiff import Variable, no_grad
from lsts.fusion import ConstantScore
from lsts.harness import experiments as ex
from lsts.harness.config import ExperimentConfig
from lsts.pipeline import (Extractors, PipelineConfig, PipelineParams, PipelineState, Schedule,
                           dfa_step, flow_warp_baseline, high_estimate, matchtrans_baseline,
                           nonlocal_baseline, run_sequence, srfu_step)
from lsts.sampler import (EmbeddingPair, LstsConfig, OffsetSet, global_attention, integer_grid,
                          propagate)
from lsts.tensor import ShapeError

C_LOW, C_HIGH = 4, 8


def build(seed=0, **flags):
    return PipelineParams.build(PipelineConfig(**flags), C_LOW, C_HIGH, seed)


def extractors():
    return Extractors.build(3, C_LOW, C_HIGH, 16, seed=0)


# -- schedule and extractors ---------------------------------------------------------------

def test_schedule():
    s = Schedule(10)
    assert s.keyframes(25) == [0, 10, 20]
    assert s.heavy_count(25) == 3 and s.heavy_count(24) == 3 and s.heavy_count(1) == 1
    assert s.is_keyframe(0)
    assert all(Schedule(1).is_keyframe(i) for i in range(7))
    with pytest.raises(ValueError):
        Schedule(0)


def test_extractor_shapes_and_determinism():
    e1, e2 = extractors(), extractors()
    frame = np.random.default_rng(0).standard_normal((3, 6, 6))
    assert e1.heavy(frame).shape == (C_HIGH, 6, 6)
    assert e1.light(frame).shape == (C_LOW, 6, 6)
    assert np.array_equal(e1.heavy(frame), e2.heavy(frame))
    with pytest.raises(ValueError):
        Extractors.build(3, 8, 8, 16, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(memory_update="sometimes")
    with pytest.raises(ValueError):
        PipelineConfig(dfa="maybe")
    with pytest.raises(ValueError):
        PipelineConfig(task_mode="other")


# -- SRFU -------------------------------------------------------------------------------------

def test_first_keyframe_initialises_memory():
    F = np.random.default_rng(1).standard_normal((C_HIGH, 6, 6))
    task, st = srfu_step(PipelineState(build()), F, index=0)
    assert np.array_equal(task.value, F) and np.array_equal(st.memory.value, F)
    assert st.last_key == 0


def test_static_video_memory_is_key():
    F = np.random.default_rng(2).standard_normal((C_HIGH, 6, 6))
    p = build()
    p.lsts_srfu.offsets = OffsetSet.from_array([[0.0, 0.0]])
    p.config.lsts = LstsConfig(n_samples=1)
    for mode in ("quality", "fixed"):
        p.config.memory_update = mode
        _, st = srfu_step(PipelineState(p), F, index=0)
        _, st = srfu_step(st, F, index=10)
        assert np.allclose(st.memory.value, F, rtol=0, atol=1e-12)


def test_fixed_memory_update_is_mean():
    rng = np.random.default_rng(3)
    p = build(memory_update="fixed")
    M, F = rng.standard_normal((2, C_HIGH, 6, 6))
    st = PipelineState(p, Variable(M), 0)
    _, st2 = srfu_step(st, F, index=10)
    align = propagate(M, F, p.lsts_srfu.offsets, p.lsts_srfu.emb, p.config.lsts).value
    assert np.allclose(st2.memory.value, (F + align) / 2, rtol=0, atol=1e-14)


def test_memory_none_mode_replaces():
    rng = np.random.default_rng(4)
    p = build(memory_update="none")
    M, F = rng.standard_normal((2, C_HIGH, 6, 6))
    task, st = srfu_step(PipelineState(p, Variable(M), 0), F, index=10)
    assert np.array_equal(task.value, F) and np.array_equal(st.memory.value, F)


def test_task_memory_mode():
    rng = np.random.default_rng(5)
    p = build(task_mode="memory")
    M, F = rng.standard_normal((2, C_HIGH, 6, 6))
    task, st = srfu_step(PipelineState(p, Variable(M), 0), F, index=10)
    assert task is st.memory


def test_srfu_shape_errors():
    with pytest.raises(ShapeError):
        srfu_step(PipelineState(build()), np.zeros((C_LOW, 6, 6)))
    st = PipelineState(build(), Variable(np.zeros((C_HIGH, 5, 5))), 0)
    with pytest.raises(ShapeError):
        srfu_step(st, np.zeros((C_HIGH, 6, 6)))


def test_separate_srfu_units():
    p = build(share_srfu_agg=False)
    assert p.agg_srfu is not p.agg_srfu_task
    shared = build()
    assert shared.agg_srfu is shared.agg_srfu_task


# -- DFA --------------------------------------------------------------------------------------

def test_dfa_requires_memory():
    with pytest.raises(ValueError):
        dfa_step(PipelineState(build()), np.zeros((C_LOW, 6, 6)))


def test_dfa_shape():
    rng = np.random.default_rng(6)
    st = PipelineState(build(), Variable(rng.standard_normal((C_HIGH, 6, 6))), 0)
    assert dfa_step(st, rng.standard_normal((C_LOW, 6, 6))).shape == (C_HIGH, 6, 6)


def test_dfa_with_memory_equal_to_high_returns_high():
    rng = np.random.default_rng(7)
    p = build(transform=False)
    p.lsts_dfa.offsets = OffsetSet.from_array([[0.0, 0.0]])
    p.config.lsts = LstsConfig(n_samples=1)
    low = rng.standard_normal((C_LOW, 6, 6))
    high = high_estimate(p, low).value
    task = dfa_step(PipelineState(p, Variable(high), 0), low)
    assert np.allclose(task.value, high, rtol=0, atol=1e-12)


def test_dfa_helps_after_training():
    cfg = ExperimentConfig().with_overrides(ladder_steps=150, ladder_train_sequences=2)
    ext = ex.build_extractors(cfg)
    params = PipelineParams.build(
        PipelineConfig(interval=cfg.interval, width_factor=cfg.width_factor,
                       lsts=ex.lsts_config(cfg)), cfg.c_low, cfg.c_high, cfg.seed + 21)
    ex.train_pipeline(params, ex.ladder_data(cfg, ext, [100, 101]), cfg)
    ev = ex.ladder_data(cfg, ext, [ex.EVAL_SEED_OFFSET + 100])
    heavy, light, oracle = ev.heavy[0], ev.light[0], ev.oracle[0]
    task_err, high_err = [], []
    with no_grad():
        st = PipelineState(params)
        for i in range(len(heavy)):
            if i % cfg.interval == 0:
                _, st = srfu_step(st, heavy[i], index=i)
                continue
            task_err.append(np.mean((dfa_step(st, light[i]).value - oracle[i]) ** 2))
            high_err.append(np.mean((high_estimate(params, light[i]).value - oracle[i]) ** 2))
    assert np.mean(task_err) < np.mean(high_err)


# -- run_sequence ----------------------------------------------------------------------------------

def test_run_sequence_routes_frames():
    frames = np.random.default_rng(8).standard_normal((25, 3, 6, 6))
    ext = extractors()
    tasks, recs, st = run_sequence(frames, ext, Schedule(10), PipelineState(build()))
    assert len(tasks) == 25 and all(t.shape == (C_HIGH, 6, 6) for t in tasks)
    assert [r.frame for r in recs if r.index_type == "key"] == [0, 10, 20]
    assert st.last_key == 20


def test_run_sequence_interval_one_and_single_frame():
    frames = np.random.default_rng(9).standard_normal((4, 3, 6, 6))
    ext = extractors()
    _, recs, _ = run_sequence(frames, ext, Schedule(1), PipelineState(build(interval=1)))
    assert all(r.index_type == "key" for r in recs)
    tasks, _, _ = run_sequence(frames[:1], ext, Schedule(10), PipelineState(build()))
    assert np.array_equal(tasks[0], ext.heavy(frames[0]))
    with pytest.raises(ValueError):
        run_sequence(frames[:0], ext, Schedule(10), PipelineState(build()))


def test_frame_record_format():
    frames = np.random.default_rng(10).standard_normal((2, 3, 6, 6))
    ext = extractors()
    oracle = [ext.heavy(f) for f in frames]
    _, recs, _ = run_sequence(frames, ext, Schedule(10), PipelineState(build()), oracle)
    assert recs[0].mse == 0.0
    line = recs[1].format(timing=False)
    fields = line.split(",")
    assert fields[0] == "1" and fields[1] == "nonkey" and fields[4] == "nan"
    assert len(recs[1].format().split(",")) == 5


def test_nonkey_cheaper_than_key():
    cfg = ExperimentConfig()
    ext = ex.build_extractors(cfg)
    params = PipelineParams.build(PipelineConfig(lsts=ex.lsts_config(cfg)), cfg.c_low,
                                  cfg.c_high, 0)
    frames = ex.make_sequence(cfg, frames=12).frames
    _, recs, _ = run_sequence(frames, ext, Schedule(10), PipelineState(params))
    key = [r.ops for r in recs if r.index_type == "key"]
    nonkey = [r.ops for r in recs if r.index_type == "nonkey"]
    assert max(nonkey) < min(key)


# -- baselines ----------------------------------------------------------------------------------------

def test_flow_warp_examples():
    F = np.random.default_rng(11).standard_normal((2, 6, 7))
    assert np.array_equal(flow_warp_baseline(F, np.zeros((2, 6, 7))), F)
    flow = np.zeros((2, 6, 7))
    flow[0] = 1.0
    out = flow_warp_baseline(F, flow)
    assert np.array_equal(out[:, :, :-1], F[:, :, 1:])
    with pytest.raises(ShapeError):
        flow_warp_baseline(F, np.zeros((2, 6, 6)))


def test_matchtrans_is_full_integer_grid():
    rng = np.random.default_rng(12)
    F_t, F_tk = rng.standard_normal((2, 4, 6, 6))
    emb = EmbeddingPair.random(4, 1, rng)
    grid = integer_grid(2)
    want = propagate(F_t, F_tk, grid, emb, LstsConfig(n_samples=len(grid))).value
    assert np.array_equal(matchtrans_baseline(F_t, F_tk, emb, radius=2).value, want)
    assert len(integer_grid(4)) == 81


def test_matchtrans_static_pair_prefers_zero_offset():
    from lsts.ops import ConvSpec
    from lsts.synth import generate
    C = 256
    F = generate(1, (C, 12, 12), seed=13).frames[0]
    eye = ConvSpec(Variable(np.eye(C)[:, :, None, None]))
    grid = integer_grid(1)
    _, w = propagate(F, F, grid, EmbeddingPair(eye, eye),
                     LstsConfig(n_samples=9, embed_channels=C), return_weights=True)
    assert np.mean(np.argmax(w.value, axis=0) == 4) >= 0.9


def test_nonlocal_examples():
    rng = np.random.default_rng(14)
    emb = EmbeddingPair.random(3, 1, rng)
    x = rng.standard_normal((3, 1, 1))
    assert np.allclose(nonlocal_baseline(x, rng.standard_normal((3, 1, 1)), emb).value, x,
                       rtol=0, atol=1e-15)
    F_t, F_tk = rng.standard_normal((2, 3, 5, 5))
    _, w = global_attention(F_t, F_tk, emb, return_weights=True)
    assert w.shape == (25, 25)
    assert np.allclose(w.value.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        nonlocal_baseline(F_t, np.zeros((3, 5, 4)), emb)
