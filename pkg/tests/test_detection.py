from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import ZERO_RATES, D, flat_oracle, make_configs
from hypothesis import given, settings
from hypothesis import strategies as st

from liqguard.lending import (
    SECONDS_PER_YEAR, PriceOracle, RateParams, ReserveConfig, ReserveState, UserPosition,
)
from liqguard.detection import (
    STRATEGIES, DetectionConfigError, LiquidationEvent, MarginPolicy, Trajectory, classify,
    consensus, detect, detect_all, effective_threshold, first_crossing, flagged,
)

STRICT = MarginPolicy.strict()


def position(weth, usdc_debt):
    return UserPosition({"WETH": D(weth)}, {"USDC": D(usdc_debt)}, 0)


def ev(t, strategy="x", ratio=0.5):
    return LiquidationEvent(t, 0.9, "insolvency", ratio, frozenset({strategy}))


class TestMargin:
    @pytest.mark.parametrize("gap,expected", [(0, 1.0), (3, 1.06), (30, 1.10)])
    def test_threshold(self, gap, expected):
        assert effective_threshold(MarginPolicy(), gap) == pytest.approx(expected)

    @given(st.floats(0, 1e4), st.floats(0, 1), st.floats(0, 1))
    def test_bounds(self, gap, inc, extra):
        p = MarginPolicy(1.0, inc, 1.0 + extra)
        assert 1.0 <= effective_threshold(p, gap) <= p.cap

    def test_invalid(self):
        with pytest.raises(DetectionConfigError):
            effective_threshold(MarginPolicy(), -1)
        with pytest.raises(DetectionConfigError):
            MarginPolicy(1.0, 0.02, 0.9)


class TestStrategies:
    def test_constant_prices_nothing(self, zero_rate_configs):
        traj = Trajectory(position(1, 1000), flat_oracle(0, WETH=1875.0, USDC=1.0),
                          zero_rate_configs, 0, 86400 * 30)
        assert traj.health_factor(0) == pytest.approx(1.5)
        assert all(r == [] for r in detect_all(traj, STRICT))

    def test_price_drop(self, zero_rate_configs):
        t_star = 40_000
        oracle = PriceOracle.from_series({"WETH": [(0, 1500.0), (t_star, 1000.0)],
                                          "USDC": [(0, 1.0)]})
        traj = Trajectory(position(1, 1000), oracle, zero_rate_configs, 0, 86400)
        assert traj.health_factor(0) == pytest.approx(1.2)
        assert traj.health_factor(t_star) == pytest.approx(0.8)
        assert first_crossing("event_driven", traj, STRICT) == t_star
        assert abs(first_crossing("binary_search", traj, STRICT) - t_star) <= 1
        res = consensus(detect_all(traj, STRICT))
        assert len(res.confirmed) == 1 and res.agreement == 1.0
        assert res.confirmed[0].detected_by == frozenset(STRATEGIES)

    def _bleed(self, hf0=1.01, days=60):
        configs = dict(make_configs(ZERO_RATES))
        configs["USDC"] = ReserveConfig("USDC", 0.80, 0.85, 0.04, 0.5, 1.0,
                                        RateParams(0.5, 0.04, 0.6, 0.8))
        debt = 1000.0
        weth = hf0 * debt / (0.8 * 2000.0)
        reserves = {a: ReserveState.at_utilization(0.8) for a in configs}
        traj = Trajectory(position(round(weth, 12), debt), flat_oracle(0, WETH=2000.0, USDC=1.0),
                          configs, 0, days * 86400, reserves=reserves)
        r = 0.54
        t_star = math.log(float(D(round(weth, 12))) * 1600 / debt) / r * SECONDS_PER_YEAR
        return traj, t_star

    def test_interest_bleed(self):
        traj, t_star = self._bleed()
        assert traj.max_borrow_rate == pytest.approx(0.54)
        assert detect("event_driven", traj, STRICT) == []
        t = first_crossing("interest_milestones", traj, STRICT)
        assert t is not None and abs(t - t_star) <= 1
        assert abs(first_crossing("binary_search", traj, STRICT) - t_star) <= 1

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1.001, 1.5))
    def test_binary_search_soundness(self, hf0):
        traj, t_star = self._bleed(hf0, days=400)
        t = first_crossing("binary_search", traj, STRICT)
        assert t is not None and t_star <= t <= t_star + 1 + 1e-6 * t_star

    def test_unknown_strategy(self, zero_rate_configs):
        traj = Trajectory(position(1, 1), flat_oracle(0, WETH=1.0, USDC=1.0),
                          zero_rate_configs, 0, 10)
        with pytest.raises(DetectionConfigError):
            detect("psychic", traj)

    def test_superset_under_dynamic_margin(self, zero_rate_configs):
        rng = np.random.default_rng(7)
        n_strict = n_dyn = 0
        for _ in range(100):
            days = 20
            times = np.arange(0, days * 86400, 6 * 3600)
            prices = 2000 * np.exp(np.cumsum(rng.normal(0, 0.03, times.size)))
            oracle = PriceOracle.from_series({"WETH": list(zip(times.tolist(), prices.tolist())),
                                              "USDC": [(0, 1.0)]})
            hf0 = rng.uniform(1.05, 1.6)
            traj = Trajectory(position(round(hf0 * 1000 / 1600, 9), 1000), oracle,
                              zero_rate_configs, 0, days * 86400)
            s = flagged(traj, STRICT)
            d = flagged(traj, MarginPolicy())
            assert d or not s
            n_strict += s
            n_dyn += d
        assert n_dyn >= n_strict > 0


class TestConsensus:
    def test_unanimous(self):
        res = consensus([[ev(100 + (i % 2) * 0.5, s)] for i, s in enumerate(STRATEGIES)])
        assert len(res.confirmed) == 1 and res.agreement == 1.0

    def test_five_of_six(self):
        lists = [[ev(100, s)] for s in STRATEGIES[:5]] + [[]]
        res = consensus(lists)
        assert res.confirmed == [] and res.agreement == 0.0
        assert res.candidates[0].detected_by == frozenset(STRATEGIES[:5])

    def test_vacuous(self):
        res = consensus([[] for _ in STRATEGIES])
        assert res.confirmed == [] and res.agreement == 1.0

    def test_wrong_arity(self):
        with pytest.raises(DetectionConfigError):
            consensus([[]] * 5)

    @given(st.permutations(range(6)), st.lists(st.integers(0, 20), min_size=6, max_size=6))
    def test_permutation_invariance(self, perm, times):
        lists = [[ev(t, s)] for t, s in zip(times, STRATEGIES)]
        a = consensus(lists)
        b = consensus([lists[i] for i in perm])
        assert [(c.time, c.detected_by) for c in a.candidates] == \
            [(c.time, c.detected_by) for c in b.candidates]
        assert a.agreement == b.agreement


class TestClassify:
    prices = {"WETH": 1.0, "USDC": 1.0}

    def test_dust(self):
        pos = UserPosition({"WETH": D("0.40")}, {"USDC": D("0.30")}, 0)
        assert classify(1.0, pos, self.prices, 1.0) == "dust"

    def test_large(self):
        pos = UserPosition({"WETH": D(6000)}, {"USDC": D(5000)}, 0)
        assert classify(0.5, pos, self.prices, 1.0) == "insolvency"

    def test_partial_small(self):
        pos = UserPosition({"WETH": D("0.80")}, {"USDC": D("0.70")}, 0)
        assert classify(0.5, pos, self.prices, 1.0) == "insolvency"

    @given(st.floats(0, 1), st.floats(0, 1e4), st.floats(0, 1e4))
    def test_total_and_invariant(self, ratio, c, d):
        pos = UserPosition({"WETH": D(round(c, 6))}, {"USDC": D(round(d, 6))}, 0)
        out = classify(ratio, pos, self.prices, 1.0)
        assert out in ("dust", "insolvency")
        if out == "dust":
            assert ratio >= 0.99 and min(round(c, 6), round(d, 6)) < 1.0
