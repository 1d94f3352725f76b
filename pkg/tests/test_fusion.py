import numpy as np
import pytest

from lsts import ops
from lsts.autodiff import Variable, grad_check
from lsts.fusion import (SCORE_WIDTHS, TRANSFORM_WIDTHS, AggregationUnit, ConstantScore,
                         TransformUnit, fuse, fuse_fixed, scaled, transform)
from lsts.tensor import ShapeError


def random_unit(C, seed, factor=1 / 16):
    rng = np.random.default_rng(seed)
    unit = AggregationUnit.build(C, rng, factor, zero_last=False)
    for p in unit.parameters():
        p.value = rng.uniform(-0.5, 0.5, size=p.shape)
    return unit


def test_constant_score_gives_half_blend():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5, 5)), rng.standard_normal((4, 5, 5))
    fused, w_a, w_b = fuse(a, b, ConstantScore(3.0))
    assert np.allclose(w_a.value, 0.5, rtol=0, atol=1e-15)
    assert np.allclose(fused.value, (a + b) / 2, rtol=0, atol=1e-15)
    assert np.allclose(fused.value, fuse_fixed(a, b).value, rtol=0, atol=1e-15)


def test_zero_last_layer_starts_as_half_blend():
    rng = np.random.default_rng(1)
    unit = AggregationUnit.build(4, rng, 1 / 16)
    a, b = rng.standard_normal((4, 5, 5)), rng.standard_normal((4, 5, 5))
    _, w_a, w_b = fuse(a, b, unit)
    assert np.all(w_a.value == 0.5) and np.all(w_b.value == 0.5)


def test_equal_operands_fuse_to_themselves():
    a = np.random.default_rng(2).standard_normal((4, 5, 5))
    fused, _, _ = fuse(a, a, random_unit(4, 2))
    assert np.allclose(fused.value, a, rtol=0, atol=1e-12)
    assert np.array_equal(fuse_fixed(a, a).value, a)


def test_fuse_fixed_example():
    assert fuse_fixed(np.zeros((1, 1, 1)), np.full((1, 1, 1), 2.0)).value.item() == 1.0


def test_weights_sum_to_one_many_trials():
    unit = random_unit(3, 3)
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = rng.standard_normal((2, 3, 4, 4)) * rng.uniform(0.1, 10)
        _, w_a, w_b = fuse(a, b, unit)
        assert w_a.shape == (1, 4, 4)
        assert np.allclose(w_a.value + w_b.value, 1.0, rtol=0, atol=1e-12)


def test_fused_within_envelope():
    unit = random_unit(3, 4)
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b = rng.standard_normal((2, 3, 4, 4))
        f = fuse(a, b, unit)[0].value
        assert np.all(f >= np.minimum(a, b) - 1e-12) and np.all(f <= np.maximum(a, b) + 1e-12)


def test_exchange_consistency():
    unit = random_unit(3, 5)
    a, b = np.random.default_rng(5).standard_normal((2, 3, 6, 6))
    f_ab, wa, wb = fuse(a, b, unit)
    f_ba, wb2, wa2 = fuse(b, a, unit)
    assert np.allclose(f_ab.value, f_ba.value, rtol=0, atol=1e-12)
    assert np.allclose(wa.value, wa2.value, rtol=0, atol=1e-15)
    assert np.allclose(wb.value, wb2.value, rtol=0, atol=1e-15)


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        fuse(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), ConstantScore())
    with pytest.raises(ShapeError):
        fuse_fixed(np.zeros((2, 3, 3)), np.zeros((1, 3, 3)))


def test_score_map_has_one_channel():
    unit = random_unit(5, 6)
    s = unit.score(np.zeros((10, 7, 9)))
    assert s.shape == (1, 7, 9)


@pytest.mark.parametrize("factor", [1.0, 1 / 16])
def test_widths_at_full_and_scaled(factor):
    rng = np.random.default_rng(7)
    agg = AggregationUnit.build(4, rng, factor)
    assert [l.out_channels for l in agg.layers] == [scaled(w, factor) for w in SCORE_WIDTHS]
    assert [l.k for l in agg.layers] == [3, 1, 1]
    tr = TransformUnit.build(2, 16, rng, factor)
    widths = [l.out_channels for l in tr.layers]
    assert widths[:2] == [scaled(w, factor) for w in TRANSFORM_WIDTHS[:2]]
    assert widths[2] == 16 and all(l.k == 3 for l in tr.layers)


def test_full_width_transform_shape():
    tr = TransformUnit.build(2, TRANSFORM_WIDTHS[2], np.random.default_rng(8), 1.0)
    out = transform(np.random.default_rng(8).standard_normal((2, 3, 3)), tr)
    assert out.shape == (1024, 3, 3)


def test_scaled_minimum_one():
    assert scaled(16, 1 / 64) == 1 and scaled(256, 1 / 16) == 16


def test_transform_zero_in_zero_out():
    tr = TransformUnit.build(4, 16, np.random.default_rng(9), 1 / 16)
    assert not transform(np.zeros((4, 6, 6)), tr).value.any()


def test_transform_channel_mismatch():
    tr = TransformUnit.build(4, 16, np.random.default_rng(10), 1 / 16)
    with pytest.raises(ShapeError):
        transform(np.zeros((3, 6, 6)), tr)


def test_transform_gradcheck():
    rng = np.random.default_rng(11)
    tr = TransformUnit.build(2, 4, rng, 1 / 32)
    for p in tr.parameters():
        p.value = rng.uniform(-0.5, 0.5, size=p.shape)
    x = Variable(rng.standard_normal((2, 5, 5)))
    probe = rng.standard_normal((4, 5, 5))
    report = grad_check(lambda: ops.vsum(ops.mul(transform(x, tr), probe)),
                        [x] + tr.parameters(), tol=1e-4)
    assert report.passed, report.format()
