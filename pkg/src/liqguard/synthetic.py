"""Seeded synthetic lending market: price paths, user flows and liquidation rows.

Used by tests and demos. Users deposit a volatile collateral, borrow a stable
asset to a random target health factor and then act at random intervals;
positions that fall below HF 1.0 are liquidated on a fixed check grid and the
liquidation is written to the log like any other row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .ingestion import TxRecord
from .lending import (
    ActionRejected, PriceOracle, RateParams, ReserveConfig, UserAction, to_decimal,
)
from .simulator import Account

START = 1_672_531_200  # 2023-01-01 UTC
HOUR = 3600


def default_configs() -> dict[str, ReserveConfig]:
    stable = RateParams(0.0, 0.04, 0.60, 0.90)
    volatile = RateParams(0.0, 0.03, 0.80, 0.80)
    return {
        "USDC": ReserveConfig("USDC", 0.75, 0.80, 0.04, 0.5, 1.0, stable),
        "WBTC": ReserveConfig("WBTC", 0.70, 0.75, 0.065, 0.5, 1.0, volatile),
        "WETH": ReserveConfig("WETH", 0.80, 0.825, 0.05, 0.5, 1.0, volatile),
    }


@dataclass(frozen=True)
class MarketSpec:
    n_users: int = 40
    days: int = 120
    seed: int = 0
    check_hours: int = 6
    mean_gap_days: float = 6.0
    vol: float = 0.9


def price_paths(spec: MarketSpec) -> dict[str, np.ndarray]:
    """Hourly prices: GBM for the volatile assets, a flat stablecoin."""
    rng = np.random.default_rng(spec.seed)
    n = spec.days * 24 + 1
    dt = 1.0 / (365 * 24)
    out = {"USDC": np.ones(n)}
    for asset, p0 in (("WETH", 2000.0), ("WBTC", 30000.0)):
        shocks = rng.normal(-0.5 * spec.vol**2 * dt, spec.vol * math.sqrt(dt), size=n - 1)
        out[asset] = p0 * np.exp(np.concatenate([[0.0], np.cumsum(shocks)]))
    return out


def _q(x: float, places: int = 6) -> Decimal:
    return to_decimal(round(x, places))


def generate_market(spec: MarketSpec = MarketSpec(), trace: dict | None = None):
    """Return ``(records, configs, paths)``; records are in time order.

    If ``trace`` is given it is filled with ``user -> [(t, hf), ...]``, the
    generator's own health factor right after each emitted row.
    """
    configs = default_configs()
    paths = price_paths(spec)
    rng = np.random.default_rng(spec.seed + 1)
    end = START + spec.days * 86400
    oracle = PriceOracle.from_series(
        {a: [(START + i * HOUR, float(p)) for i, p in enumerate(path)]
         for a, path in paths.items()})

    def price(asset, t):
        return float(paths[asset][min((t - START) // HOUR, len(paths[asset]) - 1)])

    records: list[TxRecord] = []

    def emit(t, user, kind, asset, amount, liq=None):
        p = price(asset, t)
        records.append(TxRecord(int(t), user, kind, asset, amount, float(amount) * p, p,
                                *(liq or (None, None))))
        if trace is not None:
            trace.setdefault(user, []).append((int(t), acct.value().health_factor))

    for k in range(spec.n_users):
        user = f"u{k:04d}"
        coll = "WETH" if rng.random() < 0.7 else "WBTC"
        t = START + int(rng.uniform(0, 0.6) * spec.days * 86400)
        acct = Account(configs, oracle, {coll: Decimal(10**9), "USDC": Decimal(10**12)},
                       start=t)
        usd = float(np.exp(rng.uniform(math.log(500), math.log(50_000))))
        amount = _q(usd / price(coll, t))
        acct.apply(UserAction("deposit", coll, amount))
        emit(t, user, "deposit", coll, amount)
        target = float(rng.uniform(1.05, 2.5))
        t += int(rng.integers(60, 3600))
        acct.advance(t)
        borrow = _q(usd * configs[coll].liquidation_threshold / target, 2)
        try:
            acct.apply(UserAction("borrow", "USDC", borrow))
            emit(t, user, "borrow", "USDC", borrow)
        except ActionRejected:
            pass
        next_action = t + int(rng.exponential(spec.mean_gap_days * 86400))
        grid = START + ((t - START) // (spec.check_hours * HOUR) + 1) * spec.check_hours * HOUR
        while grid <= end or next_action <= end:
            if next_action <= grid and next_action <= end:
                acct.advance(next_action)
                _random_action(rng, acct, user, coll, emit, next_action)
                next_action += int(rng.exponential(spec.mean_gap_days * 86400))
                continue
            if grid > end:
                break
            acct.advance(grid)
            v = acct.value()
            if v.debt_usd > 0 and v.health_factor < 1.0:
                res = acct.liquidate(1.0, 1.0)
                seized = res.collateral_asset or coll
                p = price(seized, grid)
                emit(grid, user, "liquidation", seized, _q(res.collateral_seized_usd / p, 8),
                     (res.debt_repaid_usd, res.collateral_seized_usd))
            grid += spec.check_hours * HOUR
    records.sort(key=lambda r: (r.timestamp, r.user_id))
    return records, configs, paths


def _random_action(rng, acct: Account, user, coll, emit, t):
    debt = acct.position.debt.get("USDC", Decimal(0))
    supplied = acct.position.collateral.get(coll, Decimal(0))
    u = rng.random()
    if u < 0.35 and debt > 0:
        kind, asset, amount = "repay", "USDC", _q(float(debt) * rng.uniform(0.1, 0.6), 2)
    elif u < 0.6:
        kind, asset, amount = "deposit", coll, _q(float(supplied or 1) * rng.uniform(0.05, 0.4))
    elif u < 0.8 and supplied > 0:
        kind, asset, amount = "withdraw", coll, _q(float(supplied) * rng.uniform(0.02, 0.15))
    else:
        v = acct.value()
        room = max(0.0, v.weighted_collateral_usd / 1.2 - v.debt_usd)
        kind, asset, amount = "borrow", "USDC", _q(room * rng.uniform(0.1, 0.9), 2)
    if not amount > 0:
        return
    try:
        acct.apply(UserAction(kind, asset, amount))
    except ActionRejected:
        return
    emit(t, user, kind, asset, amount)
