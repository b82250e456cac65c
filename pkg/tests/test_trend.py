from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import trend_naive

from liqguard.trend import DegenerateInputError, TrendParams, ols_fit, trend_score


class TestOls:
    def test_two_points(self):
        assert ols_fit([0, 1], [0, 2]) == pytest.approx((2.0, 0.0))

    def test_flat(self):
        assert ols_fit([0, 1], [1, 1]) == pytest.approx((0.0, 1.0))

    def test_three_points(self):
        assert ols_fit([0, 1, 2], [0, 1, 4]) == pytest.approx((2.0, -1 / 3))

    @pytest.mark.parametrize("t,y", [([0], [1]), ([1, 1], [0, 1])])
    def test_degenerate(self, t, y):
        with pytest.raises(DegenerateInputError):
            ols_fit(t, y)


class TestScore:
    def test_linear_example(self):
        s = trend_score([0, 1, 2, 3], [1, 2, 3, 4])
        assert s.z_slope == pytest.approx(2.68328, abs=1e-5)
        assert s.z_accel == pytest.approx(0.0, abs=1e-12)
        assert s.z_vol == pytest.approx(0.0, abs=1e-12)
        assert s.rel == pytest.approx(0.6)
        assert s.value == pytest.approx(3.16627, abs=1e-5)

    def test_zero_variance(self):
        s = trend_score([0, 1, 2, 3], [5, 5, 5, 5])
        assert s.value == 0.0 and s.degenerate and "zero_variance" in s.flags

    def test_zero_mean(self):
        s = trend_score([0, 1, 2], [-1, 0, 1])
        assert "zero_mean" in s.flags and s.rel == 0.0
        assert s.value == pytest.approx(s.z_slope + 0.8 * s.z_accel - 0.6 * s.z_vol)

    def test_short_segments_flagged(self):
        s = trend_score([0, 1], [1, 3])
        assert "past_short" in s.flags and not s.degenerate

    def test_too_short(self):
        with pytest.raises(DegenerateInputError):
            trend_score([0], [1])

    def test_params_validation(self):
        with pytest.raises(ValueError):
            TrendParams(accel_weight=float("nan"))

    @settings(max_examples=200)
    @given(st.integers(2, 12), st.integers(0, 2**31 - 1))
    def test_matches_naive(self, n, seed):
        rng = np.random.default_rng(seed)
        t = np.cumsum(rng.uniform(0.1, 5, n))
        y = rng.uniform(0.5, 40, n)
        assert trend_score(t, y).value == pytest.approx(
            trend_naive(list(t), list(y)), rel=1e-9, abs=1e-9)

    def test_scale_and_shift_invariance(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            t = np.sort(rng.uniform(0, 100, n)) + np.arange(n)
            y = rng.uniform(0.1, 50, n)
            base = trend_score(t, y).value
            c = float(rng.uniform(0.01, 100))
            assert trend_score(t, y * c).value == pytest.approx(base, abs=1e-9, rel=1e-9)
            assert trend_score(t + rng.uniform(-1e3, 1e3), y).value == pytest.approx(
                base, abs=1e-9, rel=1e-9)

    @given(st.integers(2, 15), st.floats(0.1, 10), st.floats(1, 100))
    def test_sign(self, n, slope, intercept):
        t = np.arange(n, dtype=float)
        assert trend_score(t, intercept + slope * t).value > 0
        assert trend_score(t, intercept + slope * (n - t)).value < 0

    def test_noise_lowers_score_on_average(self):
        rng = np.random.default_rng(5)
        t = np.arange(10, dtype=float)
        y = 10 + 2 * t
        clean = trend_score(t, y).value
        noisy = [trend_score(t, y + rng.normal(0, 2, t.size)).value for _ in range(1000)]
        assert np.mean(noisy) <= clean
