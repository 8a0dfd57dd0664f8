import numpy as np
import pytest

from aortaseg.normalize import (
    ConstantVolumeWarning,
    DegenerateBoundsError,
    EmptyMaskError,
    PercentileBounds,
    foreground_percentile_bounds,
    soft_clip,
    softclip_rescale,
    zscore_normalize,
)

from conftest import make_image, make_label


class TestZScore:
    def test_two_point_symmetry(self):
        v = make_image(np.array([0.0, 2.0, 0.0, 2.0]).reshape(2, 2, 1))
        out = zscore_normalize(v)
        assert np.allclose(np.sort(np.unique(out.data)), [-1.0, 1.0])

    def test_idempotent_on_normalized_input(self, rng):
        data = rng.normal(size=(6, 6, 6))
        data = (data - data.mean()) / data.std()
        v = make_image(data)
        out = zscore_normalize(v)
        assert np.allclose(out.data, v.data, atol=1e-6)

    def test_direct_arithmetic_oracle(self):
        v = make_image(np.array([10.0, 20.0, 30.0, 40.0]).reshape(1, 2, 2))
        out = zscore_normalize(v)
        expected = (np.array([10.0, 20.0, 30.0, 40.0]) - 25.0) / np.sqrt(125.0)
        assert np.allclose(out.data.ravel(), expected, atol=1e-6)

    def test_mean_zero_std_one(self, rng):
        v = make_image(rng.normal(50.0, 12.0, size=(16, 16, 16)))
        out = zscore_normalize(v)
        assert abs(out.data.mean()) < 1e-5
        assert abs(out.data.std() - 1.0) < 1e-5

    def test_constant_volume_warns_and_zeroes(self):
        v = make_image(np.full((4, 4, 4), 3.0))
        with pytest.warns(ConstantVolumeWarning):
            out = zscore_normalize(v)
        assert np.all(out.data == 0.0)

    def test_affine_invariance(self, rng):
        data = rng.normal(size=(8, 8, 8))
        a = zscore_normalize(make_image(data))
        b = zscore_normalize(make_image(2.5 * data + 17.0))
        assert np.allclose(a.data, b.data, atol=1e-5)

    def test_rejects_label(self):
        with pytest.raises(ValueError):
            zscore_normalize(make_label(np.zeros((2, 2, 2), dtype=np.int16)))


class TestPercentileBounds:
    def test_sorted_1_to_100_oracle(self):
        values = np.arange(1, 101, dtype=np.float32)
        mask = np.ones(100, dtype=np.int16)
        v = make_image(values.reshape(4, 5, 5))
        m = make_label(mask.reshape(4, 5, 5))
        b = foreground_percentile_bounds(v, m, 5, 95)
        # linear interpolation between order statistics
        srt = np.sort(values)
        lo = srt[4] + 0.95 * (srt[5] - srt[4])
        hi = srt[94] + 0.05 * (srt[95] - srt[94])
        assert b.lo == pytest.approx(5.95, abs=1e-6)
        assert b.hi == pytest.approx(95.05, abs=1e-6)
        assert b.lo == pytest.approx(lo)
        assert b.hi == pytest.approx(hi)

    def test_single_voxel_degenerate(self):
        v = make_image(np.full((2, 2, 2), 13.0))
        v.data.flat[3] = 42.0
        m = make_label(np.zeros((2, 2, 2), dtype=np.int16))
        m.data.flat[3] = 1
        b = foreground_percentile_bounds(v, m, 5, 95)
        assert b.lo == b.hi == 42.0

    def test_extreme_percentiles_are_min_max(self, rng):
        data = rng.normal(size=(5, 5, 5))
        mask = (rng.random((5, 5, 5)) < 0.5).astype(np.int16)
        mask.flat[0] = 1
        b = foreground_percentile_bounds(make_image(data), make_label(mask), 0, 100)
        masked = data.astype(np.float32)[mask == 1]
        assert b.lo == pytest.approx(masked.min())
        assert b.hi == pytest.approx(masked.max())

    def test_empty_mask_raises(self):
        v = make_image(np.zeros((2, 2, 2)))
        m = make_label(np.zeros((2, 2, 2), dtype=np.int16))
        with pytest.raises(EmptyMaskError):
            foreground_percentile_bounds(v, m)

    def test_permutation_invariance(self, rng):
        data = rng.normal(size=(4, 4, 4)).astype(np.float32)
        mask = (rng.random((4, 4, 4)) < 0.6).astype(np.int16)
        mask.flat[:2] = 1
        b1 = foreground_percentile_bounds(make_image(data), make_label(mask))
        perm = rng.permutation(64)
        b2 = foreground_percentile_bounds(
            make_image(data.ravel()[perm].reshape(4, 4, 4)),
            make_label(mask.ravel()[perm].reshape(4, 4, 4)),
        )
        assert b1 == b2

    def test_invalid_percentile_order(self):
        v = make_image(np.zeros((2, 2, 2)))
        m = make_label(np.ones((2, 2, 2), dtype=np.int16))
        with pytest.raises(ValueError):
            foreground_percentile_bounds(v, m, 95, 5)

    def test_bounds_invariants(self):
        with pytest.raises(ValueError):
            PercentileBounds(2.0, 1.0)
        with pytest.raises(ValueError):
            PercentileBounds(np.nan, 1.0)


class TestSoftClip:
    def test_closed_form_at_zero(self):
        # S_10(0) = ln(2 / (1 + e^-10)) / 10
        expected = np.log(2.0 / (1.0 + np.exp(-10.0))) / 10.0
        assert soft_clip(0.0, 10.0) == pytest.approx(expected, abs=1e-12)
        assert soft_clip(0.0, 10.0) == pytest.approx(0.0693, abs=1e-4)

    def test_symmetry_point(self):
        for k in (1.0, 5.0, 10.0, 100.0):
            assert soft_clip(0.5, k) == pytest.approx(0.5, abs=1e-15)

    def test_symmetry_identity_on_grid(self):
        v = np.linspace(-2.0, 3.0, 1000)
        total = soft_clip(v, 10.0) + soft_clip(1.0 - v, 10.0)
        assert np.abs(total - 1.0).max() < 1e-12

    def test_converges_to_hard_clamp(self):
        v = np.linspace(-2.0, 3.0, 2001)
        assert np.abs(soft_clip(v, 100.0) - np.clip(v, 0.0, 1.0)).max() < 0.01

    def test_strictly_monotonic(self, rng):
        x = np.sort(rng.uniform(-3, 4, size=200))
        y = soft_clip(x, 10.0)
        assert np.all(np.diff(y) > 0)

    def test_output_open_interval(self):
        v = np.linspace(-3.0, 4.0, 101)
        y = soft_clip(v, 10.0)
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            soft_clip(0.5, 0.0)


class TestSoftclipRescale:
    def test_maps_bounds_correctly(self, rng):
        data = rng.uniform(100.0, 400.0, size=(6, 6, 6))
        v = make_image(data)
        b = PercentileBounds(150.0, 350.0)
        out = softclip_rescale(v, b, 10.0)
        expected = soft_clip((data.astype(np.float64) - 150.0) / 200.0, 10.0)
        assert np.allclose(out.data, expected, atol=1e-6)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_monotonic_in_input(self, rng):
        xs = rng.uniform(-500, 1500, size=(4, 4, 4))
        v = make_image(xs)
        out = softclip_rescale(v, PercentileBounds(0.0, 1000.0), 10.0)
        order_in = np.argsort(xs.ravel())
        assert np.all(np.diff(out.data.astype(np.float64).ravel()[order_in]) >= 0)

    def test_degenerate_range_raises(self):
        v = make_image(np.zeros((2, 2, 2)))
        with pytest.raises(DegenerateBoundsError):
            softclip_rescale(v, PercentileBounds(5.0, 5.0))
