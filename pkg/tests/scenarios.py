"""Hand-built hazard engines and a constructed replay cohort.

The engines make every event type a constant-hazard process except
liquidation, whose log-hazard is ``-k * log(HF)``. With these, a profile is at
risk exactly when its current health factor is at or below ``HF_STAR``, so the
minimal rescuing repay has a closed form.
"""

from __future__ import annotations

from decimal import Decimal

import numpy as np
from conftest import make_configs

from liqguard.hazard import BaselineHazard, HazardEngine, HazardModel
from liqguard.ingestion import EventLog, TxRecord
from liqguard.lending import PriceOracle, RateParams, ReserveConfig, to_decimal
from liqguard.survival import feature_names

HF_STAR = 2.0
K = 20.0
OTHER_H = {"repay": 0.5, "deposit": 0.4, "withdraw": 0.3, "borrow": 0.2}

T0 = 1_700_000_000
T_REC = T0 + 60
T_DROP = T_REC + 2 * 86400
T_END = T_REC + 10 * 86400
DROP = 0.7
FUTURE_UNITS = Decimal("0.000001")


def engines(hf_star: float = HF_STAR, k: float = K) -> dict[str, HazardEngine]:
    names = feature_names()
    out = {}
    for e, h in OTHER_H.items():
        out[e] = HazardEngine(HazardModel("linear_cox", coefficients=np.zeros(len(names))),
                              BaselineHazard(0.0, [1.0], [h]), 7.0)
    beta = np.zeros(len(names))
    beta[names.index("logHealthFactor")] = -k
    h_liq = max(OTHER_H.values()) * hf_star ** k
    out["liquidation"] = HazardEngine(HazardModel("linear_cox", coefficients=beta),
                                      BaselineHazard(0.0, [1.0], [h_liq]), 7.0)
    return out


def configs():
    out = dict(make_configs())
    out["WBTC"] = ReserveConfig("WBTC", 0.75, 0.80, 0.05, 0.5, 1.0, RateParams())
    return out


PRICE0 = {"WETH": 2000.0, "WBTC": 30000.0, "USDC": 1.0}
#: savable positions sit on WETH (30% drop), unsavable ones on WBTC (75% crash)
CRASH = {"WETH": DROP, "WBTC": 0.25}


def oracle() -> PriceOracle:
    series = {a: [(T0, p)] for a, p in PRICE0.items()}
    for a, f in CRASH.items():
        series[a].append((T_DROP, PRICE0[a] * f))
    return PriceOracle.from_series(series)


def user_records(user: str, asset: str, amount: Decimal, debt: Decimal) -> list[TxRecord]:
    p0, p1 = PRICE0[asset], PRICE0[asset] * CRASH[asset]
    return [TxRecord(T0, user, "deposit", asset, amount, float(amount) * p0, p0),
            TxRecord(T_REC, user, "borrow", "USDC", debt, float(debt), 1.0),
            TxRecord(T_END, user, "deposit", asset, FUTURE_UNITS, float(FUTURE_UNITS) * p1, p1)]


def _q(x: float, places: int) -> Decimal:
    return to_decimal(round(x, places))


def cohort(seed: int = 0, n_savable: int = 20, n_unsavable: int = 10, n_dust: int = 10,
           n_safe: int = 10):
    """Return ``(log, wallets, kinds)``; kinds maps user -> scenario kind.

    Wallets start with the collateral only; the borrowed USDC stays in the
    wallet and is what a recommended repay spends.
    """
    rng = np.random.default_rng(seed)
    records, wallets, kinds = [], {}, {}
    plan = (["savable"] * n_savable + ["unsavable"] * n_unsavable + ["dust"] * n_dust
            + ["safe"] * n_safe)
    for i, kind in enumerate(plan):
        user = f"s{i:03d}"
        asset = "WBTC" if kind == "unsavable" else "WETH"
        p0 = PRICE0[asset]
        if kind == "dust":
            amount, debt = Decimal("0.00025"), Decimal("0.30")
        else:
            usd = float(rng.uniform(2_000, 50_000))
            hf0 = float(rng.uniform(3.0, 5.0) if kind == "safe" else rng.uniform(1.15, 1.35))
            amount = _q(usd / p0, 8)
            debt = _q(float(amount) * p0 * 0.8 / hf0, 2)
        wallets[user] = {asset: amount + FUTURE_UNITS}
        records += user_records(user, asset, amount, debt)
        kinds[user] = kind
    return EventLog.from_records(records), wallets, kinds
