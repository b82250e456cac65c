from __future__ import annotations

from decimal import Decimal

import pytest
import scenarios as sc
from conftest import D

from liqguard.agent import Recommendation
from liqguard.detection import LiquidationEvent, MarginPolicy
from liqguard.ingestion import EventLog, TxRecord
from liqguard.replay import (
    CohortContext, ReplayConfig, ReplayError, ReplayHalf, ReplayOutcome, ReplayProfile,
    apply_exclusions, cohort_metrics, evaluate_cohort, fork_and_replay, sample_checkpoints,
    spearman, zero_debt_artifact,
)
from liqguard.survival import EventPairTask, SurvivalRecord


def liq(t, cls="insolvency"):
    return LiquidationEvent(t, 0.9, cls, 1.0 if cls == "dust" else 0.5, frozenset({"x"}))


def outcome(base, inter, t_rec=0, user="u"):
    b = ReplayHalf(liquidations=[liq(100)] if base else [])
    i = ReplayHalf(liquidations=[liq(100)] if inter else [])
    return ReplayOutcome(user, t_rec, base, inter, b.classification, i.classification, None,
                         baseline=b, intervention=i)


def one_user(hf0=1.2, usd=10_000.0):
    weth = D(round(usd / 2000, 8))
    debt = D(round(usd * 0.8 / hf0, 2))
    return sc.user_records("u", "WETH", weth, debt), {"WETH": weth + sc.FUTURE_UNITS}, debt


class TestMetrics:
    def test_three_profiles(self):
        m = cohort_metrics([outcome(True, False, user="a"), outcome(False, False, user="b"),
                            outcome(True, True, user="c")])
        assert m.salvage_rate == 0.5 and m.worsening_rate == 0.0
        assert m.n_saved == 1 and m.n_baseline_liquidated == 2

    def test_no_baseline_liquidations(self):
        m = cohort_metrics([outcome(False, False), outcome(False, True, user="v")])
        assert m.salvage_rate is None and m.worsening_rate == 0.5

    def test_identities(self):
        outs = [outcome(b, i, user=f"u{k}") for k, (b, i) in
                enumerate([(1, 0), (1, 1), (0, 1), (0, 0), (1, 0), (0, 0), (1, 1)])]
        m = cohort_metrics(outs)
        assert (m.salvage_rate * m.n_baseline_liquidated).is_integer()
        assert (m.worsening_rate * m.n_evaluated).is_integer()


class TestExclusions:
    def test_dust_only(self):
        o = outcome(True, True)
        o.baseline.liquidations = [liq(100, "dust")]
        apply_exclusions([o])
        assert o.excluded == "dust_only" and o.baseline_liquidated is None

    def test_too_fast(self):
        o = outcome(True, True, t_rec=99)
        assert apply_exclusions([o], block_time=2) == [] and o.excluded == "too_fast"

    def test_lead_ok(self):
        o = outcome(True, True, t_rec=98)
        assert apply_exclusions([o], block_time=2) == [o] and o.excluded is None

    def test_zero_debt_artifact(self):
        o = outcome(True, True)
        o.zero_debt_artifact = True
        apply_exclusions([o])
        assert o.excluded == "zero_debt_artifact"

    def test_idempotent(self):
        outs = [outcome(True, True, t_rec=99), outcome(True, False, user="b")]
        first = apply_exclusions(outs)
        state = [(o.excluded, o.baseline_liquidated) for o in outs]
        assert apply_exclusions(outs) == first
        assert [(o.excluded, o.baseline_liquidated) for o in outs] == state

    def test_zero_debt_detection(self, configs):
        oracle = sc.oracle()
        evs = [TxRecord(sc.T0, "u", "deposit", "WETH", D(1), 2000.0, 2000.0),
               TxRecord(sc.T_REC + 100, "u", "liquidation", "WETH", D("0.1"), 200.0, 2000.0,
                        190.0, 200.0)]
        assert zero_debt_artifact(evs, sc.T0, oracle, configs, {"WETH": D(1)})


class TestForkAndReplay:
    def test_baseline_liquidated(self):
        evs, wallet, _ = one_user()
        half = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet)
        assert half.liquidated and half.first_liquidation == sc.T_DROP
        assert half.classification == "insolvency" and half.agreement == 1.0

    def test_repay_keeps_position_safe(self):
        evs, wallet, debt = one_user()
        # HF after repay of r: 0.8 * 10000 / (debt - r); keep HF > 1.10 after a 30% drop
        r = debt - D(round(0.8 * 10_000 * 0.7 / 1.2, 2))
        rec = Recommendation("repay", "USDC", r)
        half = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet, rec)
        assert not half.liquidated
        assert all(hf > 1.10 for _, hf in half.checkpoints)

    def test_deterministic(self):
        evs, wallet, _ = one_user()
        a = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet)
        b = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet)
        assert a == b

    def test_no_future(self):
        evs, wallet, _ = one_user()
        with pytest.raises(ReplayError):
            fork_and_replay(evs, sc.T_END, sc.oracle(), sc.configs(), wallet)

    def test_dominance(self):
        evs, wallet, debt = one_user(1.5)
        # future withdraw that stays feasible in both halves
        evs = evs[:2] + [TxRecord(sc.T_REC + 86400, "u", "withdraw", "WETH", D("0.1"), 200.0,
                                  2000.0)] + evs[2:]
        rec = Recommendation("repay", "USDC", Decimal(500))
        cfg = ReplayConfig(policy=MarginPolicy.strict())
        base = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet, None, cfg)
        inter = fork_and_replay(evs, sc.T_REC, sc.oracle(), sc.configs(), wallet, rec, cfg)
        assert inter.skipped == base.skipped == 0
        for (t1, h1), (t2, h2) in zip(base.checkpoints, inter.checkpoints):
            if base.liquidations and t1 >= base.first_liquidation:
                break
            assert t1 == t2 and h2 >= h1


class TestCohort:
    def test_constructed_cohort(self):
        log, wallets, kinds = sc.cohort(n_savable=4, n_unsavable=2, n_dust=2, n_safe=2)
        ctx = CohortContext(log, sc.oracle(), sc.configs(), wallets)
        profiles = [ReplayProfile(u, sc.T_REC) for u in log.users]
        res = evaluate_cohort(profiles, ctx, sc.engines(), workers=3)
        m = res.metrics
        assert m.n_errors == 0 and m.worsening_rate == 0.0 and m.dust_avoided == 2
        assert m.n_saved == 4 and m.n_baseline_liquidated == 6
        serial = evaluate_cohort(profiles, ctx, sc.engines())
        assert [o.to_row() for o in serial.outcomes] == [o.to_row() for o in res.outcomes]

    def test_errors_collected(self):
        log, wallets, _ = sc.cohort(n_savable=1, n_unsavable=0, n_dust=0, n_safe=0)
        ctx = CohortContext(log, sc.oracle(), sc.configs(), wallets)
        res = evaluate_cohort([ReplayProfile("s000", sc.T_END)], ctx, sc.engines())
        assert res.metrics.n_errors == 1 and res.errors[0]["error"] == "ReplayError"


def test_sample_checkpoints():
    recs = []
    for i in range(10):
        u = f"u{i}"
        recs += [TxRecord(100 * i, u, "deposit", "WETH", D(1), 1.0, 1.0),
                 TxRecord(100 * i + 2000, u, "borrow", "USDC", D(1), 1.0, 1.0)]
    log = EventLog.from_records(recs)
    task = EventPairTask("deposit", "liquidation")
    other = EventPairTask("deposit", "borrow")
    by_task = {
        task: [SurvivalRecord(f"u{i}", 100 * i, float(10 - i), 1, None) for i in range(10)],
        other: [SurvivalRecord(f"u{i}", 100 * i, 1.0, 1, None) for i in range(10)],
    }
    a = sample_checkpoints(by_task, log, per_pair=2, window=(0.0, 1.0), seed=1)
    assert a == sample_checkpoints(by_task, log, per_pair=2, window=(0.0, 1.0), seed=1)
    keys = {(p.user_id, p.t_rec) for p in a}
    assert {("u9", 900), ("u8", 800)} <= keys and len(keys) <= 4


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_reconstruction_tracks_ground_truth_hf():
    import math

    import numpy as np

    from liqguard.ingestion import EventLog, infer_wallet_balances
    from liqguard.lending import PriceOracle
    from liqguard.simulator import replay_history
    from liqguard.synthetic import START, MarketSpec, generate_market

    trace: dict = {}
    records, configs, paths = generate_market(MarketSpec(n_users=20, days=60, seed=5), trace)
    oracle = PriceOracle.from_series(
        {a: [(START + i * 3600, float(p)) for i, p in enumerate(path)]
         for a, path in paths.items()})
    log = EventLog.from_records(records)
    cors = []
    for u in log.users:
        evs = log.for_user(u)
        _, snaps = replay_history(evs, oracle, configs, infer_wallet_balances(evs))
        truth = [min(hf, 1e6) for _, hf in trace[u]]
        ours = [min(s.health_factor, 1e6) for s in snaps]
        assert len(truth) == len(ours)
        c = spearman(truth, ours)
        if not math.isnan(c):
            cors.append(c)
    assert cors and float(np.median(cors)) == pytest.approx(1.0)
