import logging
import math

import numpy as np
import pytest

from d3depth.core import DepthMap, PatternMask
from d3depth.exceptions import ParameterError
from d3depth.patterns import grid_pattern
from d3depth.perturb import (
    PerturbKind,
    PerturbSpec,
    apply_dropout,
    apply_gaussian,
    apply_misregistration,
    misregistration_params,
    misregistered_coords,
    noisy_values,
    perturb_samples,
)
from d3depth.sparsify import point_samples


def _ramp(h=20, w=30):
    yy, xx = np.mgrid[:h, :w]
    return DepthMap(1.0 + xx + 100.0 * yy)


def test_dropout_rate_and_reproducibility():
    mask = PatternMask(np.ones((100, 100)))
    kept, flag = apply_dropout(mask, 0.3, seed=5)
    assert not flag
    assert abs(kept.count / 10000 - 0.7) < 0.02
    assert not (kept.bits & ~mask.bits).any()
    np.testing.assert_array_equal(kept.bits, apply_dropout(mask, 0.3, seed=5)[0].bits)
    assert apply_dropout(mask, 0.0)[0].count == 10000


def test_dropout_keeps_one_point_when_all_would_go(caplog):
    bits = np.zeros((4, 4), dtype=bool)
    bits[2, 3] = bits[1, 1] = True
    seed = next(s for s in range(1000) if (np.random.default_rng(s).random(2) < 0.99).all())
    with caplog.at_level(logging.WARNING):
        kept, flag = apply_dropout(PatternMask(bits), 0.99, seed)
    assert flag and kept.count == 1 and kept.bits[1, 1]
    assert "kept the first" in caplog.text


def test_dropout_validation():
    with pytest.raises(ParameterError):
        apply_dropout(PatternMask([[1]]), 1.0)
    with pytest.raises(ParameterError):
        PerturbSpec("dropout", 1.0)
    with pytest.raises(ParameterError):
        PerturbSpec("gaussian", -0.1)
    with pytest.raises(ValueError):
        PerturbSpec("blur", 0.1)


def test_noisy_values_formula_and_clamp():
    np.testing.assert_allclose(noisy_values([2.0, 4.0], [0.1, -0.5]), [2.2, 2.0])
    np.testing.assert_allclose(noisy_values([2.0], [-3.0]), [0.001])
    np.testing.assert_allclose(noisy_values([2.0], [0.25], additive=True), [2.25])


def test_gaussian_relative_noise_statistics():
    samples = DepthMap(np.full((200, 200), 5.0))
    noisy = apply_gaussian(samples, 0.03, seed=1).values
    rel = noisy / 5.0 - 1.0
    assert abs(rel.std() - 0.03) < 0.001
    assert abs(rel.mean()) < 0.001


def test_gaussian_only_touches_samples():
    depth = _ramp()
    mask = grid_pattern(20, 30, 5)
    out = apply_gaussian(point_samples(depth, mask), 0.5, seed=2).values
    assert np.all(out[~mask.bits] == 0)
    assert np.all(out[mask.bits] >= 0.001)
    assert apply_gaussian(point_samples(depth, mask), 0.0).values[mask.bits].tolist() == depth.values[mask.bits].tolist()


def test_constant_shift_reads_offset_pixels():
    depth = _ramp()
    mask = grid_pattern(20, 30, 5)
    out = apply_misregistration(depth, mask, PerturbKind.SHIFT_CONST, 2.0, direction=0.0)
    for x, y in mask.points():
        assert out.values[y, x] == depth.values[y, min(x + 2, 29)]
    down = apply_misregistration(depth, mask, "shift_const", 3.0, direction=math.pi / 2)
    for x, y in mask.points():
        assert down.values[y, x] == depth.values[min(y + 3, 19), x]


def test_shift_magnitudes():
    for seed in range(20):
        dx, dy = misregistration_params(PerturbKind.SHIFT_CONST, 4.0, seed)
        assert math.hypot(dx, dy) == pytest.approx(4.0)
        dx, dy = misregistration_params(PerturbKind.SHIFT_RANDOM, 4.0, seed)
        assert math.hypot(dx, dy) <= 4.0 + 1e-12
        angle = misregistration_params(PerturbKind.ROT_RANDOM, 2.0, seed)
        assert abs(angle) <= 2.0
        assert abs(misregistration_params(PerturbKind.ROT_CONST, 2.0, seed)) == 2.0


def test_rotation_about_center():
    # 90 degrees about the center of a 5x5 image maps (4, 2) to (2, 4)
    xr, yr = misregistered_coords(np.array([[4, 2], [2, 2], [0, 0]]), (5, 5), PerturbKind.ROT_CONST, 90.0)
    assert list(zip(xr, yr)) == [(2, 4), (2, 2), (4, 0)]


def test_coordinates_are_clamped():
    xr, yr = misregistered_coords(np.array([[0, 0], [9, 9]]), (10, 10), PerturbKind.SHIFT_CONST, (-5.0, 20.0))
    assert list(zip(xr, yr)) == [(0, 9), (4, 9)]


def test_invalid_read_falls_back_to_nearest_valid():
    values = np.ones((5, 5)) * 2.0
    values[2, 3] = 0.0
    values[2, 4] = 7.0
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    out = apply_misregistration(DepthMap(values), PatternMask(m), "shift_const", 1.0, direction=0.0)
    # (3, 2) is invalid; its nearest valid pixel in row-major order is (3, 1)
    assert out.values[2, 2] == 2.0


def test_perturb_samples_dispatch():
    depth = _ramp()
    mask = grid_pattern(20, 30, 5)
    m, s, flag = perturb_samples(PerturbSpec("dropout", 0.5, seed=3), depth, mask)
    assert m.count < mask.count and not flag
    np.testing.assert_array_equal(s.values, point_samples(depth, m).values)
    m, s, _ = perturb_samples(PerturbSpec("gaussian", 0.1), depth, mask, seed=4)
    assert m is mask and not np.array_equal(s.values, point_samples(depth, mask).values)
    m, s, _ = perturb_samples(PerturbSpec("rot_const", 0.0), depth, mask)
    np.testing.assert_array_equal(s.values, point_samples(depth, mask).values)
