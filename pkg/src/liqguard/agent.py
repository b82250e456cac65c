"""Risk identification and minimum-viable intervention search."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from decimal import Decimal

import numpy as np

from .hazard import HazardEngine, ScoreLookupError
from .ingestion import TxRecord
from .lending import ZERO, PriceOracle, ReserveConfig, UserAction, to_decimal
from .simulator import Account, DEFAULT_UTILIZATION, replay_history
from .survival import FeatureConfig, MarketHistory, _user_feature_rows, build_features
from .trend import DegenerateInputError, TrendParams, TrendScore, trend_score

logger = logging.getLogger(__name__)

RISK_EVENTS = ("liquidation", "repay", "deposit", "withdraw", "borrow")


class AgentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AgentParams:
    multiplier: float = 2.0
    alpha_min: Decimal = Decimal("0.000001")
    history_depth: int = 10
    trend: TrendParams = field(default_factory=TrendParams)

    def __post_init__(self):
        if not self.multiplier > 1:
            raise AgentConfigError("multiplier must be > 1")
        object.__setattr__(self, "alpha_min", to_decimal(self.alpha_min))
        if not self.alpha_min > 0:
            raise AgentConfigError("alpha_min must be > 0")
        if self.history_depth < 1:
            raise AgentConfigError("history_depth must be >= 1")


@dataclass
class ProfileState:
    """A user at a recommendation checkpoint ``t_rec``.

    ``account`` holds the reconstructed state right after the user's events at
    ``t_rec``. ``past_times``/``past_features`` are the trailing checkpoints
    strictly before ``t_rec``; ``features`` is the current vector.
    """

    user_id: str
    t_rec: int
    events: tuple[TxRecord, ...]
    account: Account
    market: MarketHistory
    features: np.ndarray
    past_times: list[int]
    past_features: list[np.ndarray]
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)

    @property
    def history(self) -> tuple[TxRecord, ...]:
        return tuple(e for e in self.events if e.timestamp <= self.t_rec)

    @property
    def future(self) -> tuple[TxRecord, ...]:
        return tuple(e for e in self.events if e.timestamp > self.t_rec)


def build_profile(events: Sequence[TxRecord], t_rec: int, oracle: PriceOracle,
                  configs: Mapping[str, ReserveConfig], wallet: Mapping[str, Decimal], *,
                  market: MarketHistory | None = None, history_depth: int = 10,
                  utilization: float | Mapping[str, float] = DEFAULT_UTILIZATION,
                  feature_config: FeatureConfig = FeatureConfig()) -> ProfileState:
    events = tuple(events)
    hist = [e for e in events if e.timestamp <= t_rec]
    if not hist:
        raise AgentConfigError("profile needs at least one historical checkpoint")
    if market is None:
        market = MarketHistory.from_records(events)
    account, snaps = replay_history(hist, oracle, configs, wallet, until=t_rec,
                                    utilization=utilization)
    rows = _user_feature_rows(hist, market, snaps, feature_config)
    if hist[-1].timestamp == t_rec:
        current = rows[-1]
    else:
        current = build_features(hist, market, t_rec, None, account.snapshot(), feature_config)
    past = [(e.timestamp, x) for e, x in zip(hist, rows) if e.timestamp < t_rec]
    past = past[-(history_depth - 1):] if history_depth > 1 else []
    return ProfileState(hist[0].user_id, int(t_rec), events, account, market, current,
                        [t for t, _ in past], [x for _, x in past], feature_config)


# --------------------------------------------------------------------------
# Assessment


@dataclass(frozen=True)
class RiskAssessment:
    T: dict[str, float]
    V: dict[str, TrendScore]
    at_risk: bool
    via: str | None = None

    def to_json(self) -> dict:
        return {"T": {e: _num(v) for e, v in self.T.items()},
                "V": {e: _num(v.value) for e, v in self.V.items()},
                "V_flags": {e: sorted(v.flags) for e, v in self.V.items() if v.flags},
                "at_risk": self.at_risk, "via": self.via}


def _num(x: float):
    return float(x) if math.isfinite(x) else None


def _safe_trend(times: Sequence[float], values: Sequence[float],
                params: TrendParams) -> TrendScore:
    try:
        return trend_score(times, values, params)
    except DegenerateInputError:
        return TrendScore(0.0, flags=frozenset({"too_short"}))


def risk_predicate(T: Mapping[str, float], V: Mapping[str, TrendScore]) -> tuple[bool, str | None]:
    """``T_liq`` is a (tied) minimum, or ``V_liq`` is a (tied) minimum among
    non-degenerate trend scores with at least one other event to compare with."""
    if T["liquidation"] <= min(T.values()):
        return True, "time"
    live = {e: v.value for e, v in V.items() if not v.degenerate}
    if "liquidation" in live and len(live) > 1 and live["liquidation"] <= min(live.values()):
        return True, "trend"
    return False, None


class _Scorer:
    """Return periods of one profile under the per-event engines."""

    def __init__(self, profile: ProfileState, engines: Mapping[str, HazardEngine]):
        missing = [e for e in RISK_EVENTS if e not in engines]
        if missing:
            raise AgentConfigError(f"missing hazard engine for: {', '.join(missing)}")
        self.profile = profile
        self.engines = engines
        p = profile
        self.times = [t / 86400.0 for t in p.past_times] + [p.t_rec / 86400.0]
        keys = [(p.user_id, t) for t in p.past_times]
        self.past_T = {}
        for e in RISK_EVENTS:
            self.past_T[e] = list(engines[e].return_periods(np.vstack(p.past_features), keys)
                                  ) if p.past_features else []

    def current(self, x: np.ndarray, key_time: int,
                counterfactual: bool = False) -> dict[str, float]:
        if counterfactual and any(_needs_keys(eng) for eng in self.engines.values()):
            raise ScoreLookupError("external scores cannot rate a counterfactual state")
        key = (self.profile.user_id, key_time)
        return {e: float(self.engines[e].return_periods(x[None, :], [key])[0])
                for e in RISK_EVENTS}

    def assess(self, T: Mapping[str, float], params: TrendParams) -> RiskAssessment:
        V = {e: _safe_trend(self.times, self.past_T[e] + [T[e]], params) for e in RISK_EVENTS}
        at_risk, via = risk_predicate(T, V)
        return RiskAssessment(dict(T), V, at_risk, via)


def _needs_keys(engine: HazardEngine) -> bool:
    return engine.model.kind == "external_scores"


def assess_risk(profile: ProfileState, engines: Mapping[str, HazardEngine],
                trend_params: TrendParams = TrendParams()) -> RiskAssessment:
    scorer = _Scorer(profile, engines)
    return scorer.assess(scorer.current(profile.features, profile.t_rec), trend_params)


# --------------------------------------------------------------------------
# Recommendation


@dataclass(frozen=True)
class Recommendation:
    action_kind: str
    asset: str
    amount: Decimal
    capped_at_max: bool = False
    iterations: int = 0
    target_asset: str = ""
    rationale: dict = field(default_factory=dict)
    adjustments: tuple[str, ...] = ()
    reason: str | None = None

    def __post_init__(self):
        if self.action_kind not in ("repay", "deposit", "none"):
            raise AgentConfigError(f"bad action kind {self.action_kind!r}")
        if self.action_kind != "none" and not self.amount > 0:
            raise AgentConfigError("an action needs a positive amount")
        if not self.target_asset:
            object.__setattr__(self, "target_asset", self.asset)

    def to_json(self) -> dict:
        return {"action": self.action_kind, "asset": self.asset,
                "target_asset": self.target_asset, "amount": str(self.amount),
                "iterations": self.iterations, "capped_at_max": self.capped_at_max,
                "adjustments": list(self.adjustments), "reason": self.reason,
                "rationale": self.rationale}


def _none(reason: str | None, rationale: dict) -> Recommendation:
    return Recommendation("none", "", ZERO, rationale=rationale, reason=reason)


def _largest_wallet(account: Account, usable=lambda a: True) -> str | None:
    best = None
    for a in sorted(account.wallet):
        bal = account.wallet[a]
        if bal <= 0 or not usable(a) or a not in account.oracle.times:
            continue
        try:
            usd = float(bal) * account.oracle.snapshot(account.time, [a])[a]
        except LookupError:
            continue
        if best is None or usd > best[0]:
            best = (usd, a)
    return None if best is None else best[1]


def _largest_debt(account: Account) -> str | None:
    debts = {a: v for a, v in account.position.debt.items() if v > 0}
    if not debts:
        return None
    prices = account.prices()
    return max(debts, key=lambda a: (float(debts[a]) * prices[a], a))


def _wallet_usd(account: Account) -> float:
    total = 0.0
    for a, bal in account.wallet.items():
        if bal > 0 and a in account.oracle.times:
            try:
                total += float(bal) * account.oracle.snapshot(account.time, [a])[a]
            except LookupError:
                pass
    return total


def fund(account: Account, asset: str, amount: Decimal) -> None:
    """Top up ``asset`` in the wallet by swapping other holdings at oracle prices,
    largest USD holding first. No slippage."""
    short = amount - account.wallet.get(asset, ZERO)
    if short <= 0:
        return
    p_target = account.oracle.snapshot(account.time, [asset])[asset]
    need_usd = float(short) * p_target
    while need_usd > 0:
        src = _largest_wallet(account, lambda a: a != asset)
        if src is None:
            break
        p_src = account.oracle.snapshot(account.time, [src])[src]
        take = min(account.wallet[src], to_decimal(need_usd / p_src))
        account.wallet[src] -= take
        got = float(take) * p_src
        account.wallet[asset] = account.wallet.get(asset, ZERO) + to_decimal(got / p_target)
        need_usd -= got
        if take <= 0:
            break
    # float round-off must not leave the target a hair short
    if account.wallet.get(asset, ZERO) < amount and need_usd <= 1e-9 * max(1.0, float(amount)):
        account.wallet[asset] = amount


def apply_recommendation(account: Account, rec: Recommendation, mode: str = "strict") -> str:
    """Execute a recommendation on ``account`` at its current time."""
    if rec.action_kind == "none":
        return "skipped"
    if rec.action_kind == "deposit":
        return account.apply(UserAction("deposit", rec.asset, rec.amount), mode)
    amount = rec.amount
    if rec.asset == rec.target_asset:
        fund(account, rec.asset, min(amount, account.position.debt.get(rec.asset, ZERO)))
    else:
        # sweep funding asset into the debt asset
        p = account.oracle.snapshot(account.time, [rec.asset, rec.target_asset])
        take = min(rec.amount, account.wallet.get(rec.asset, ZERO))
        account.wallet[rec.asset] = account.wallet.get(rec.asset, ZERO) - take
        amount = to_decimal(float(take) * p[rec.asset] / p[rec.target_asset])
        account.wallet[rec.target_asset] = account.wallet.get(rec.target_asset, ZERO) + amount
    return account.apply(UserAction("repay", rec.target_asset, amount), mode)


def _max_possible(account: Account, kind: str, asset: str) -> Decimal:
    if kind == "repay":
        owed = account.position.debt.get(asset, ZERO)
        price = account.oracle.snapshot(account.time, [asset])[asset]
        return min(owed, to_decimal(_wallet_usd(account) / price))
    return account.wallet.get(asset, ZERO)


def _counterfactual(profile: ProfileState, scorer: _Scorer, kind: str, asset: str,
                    amount: Decimal, params: TrendParams) -> RiskAssessment:
    acct = profile.account.copy()
    if kind == "repay":
        fund(acct, asset, amount)
    acct.apply(UserAction(kind, asset, amount), "strict")
    price = acct.oracle.snapshot(acct.time, [asset])[asset]
    tx = TxRecord(profile.t_rec, profile.user_id, kind, asset, amount,
                  float(amount) * price, price)
    x = build_features([*profile.history, tx], profile.market, profile.t_rec, tx,
                       acct.snapshot(), profile.feature_config)
    return scorer.assess(scorer.current(x, profile.t_rec, counterfactual=True), params)


def assess_action(profile: ProfileState, engines: Mapping[str, HazardEngine], kind: str,
                  asset: str, amount, trend_params: TrendParams = TrendParams(),
                  ) -> RiskAssessment:
    """Risk assessment after a hypothetical repay/deposit of ``amount`` at ``t_rec``."""
    return _counterfactual(profile, _Scorer(profile, engines), kind, asset,
                           to_decimal(amount), trend_params)


def recommend(profile: ProfileState, assessment: RiskAssessment,
              engines: Mapping[str, HazardEngine], params: AgentParams = AgentParams(),
              ) -> Recommendation:
    """Smallest rung of the ladder alpha_min * m**k that clears the risk predicate."""
    before = assessment.to_json()
    if not assessment.at_risk:
        return _none(None, {"before": before, "advisory": "deposit"})
    acct = profile.account
    kind = "repay" if assessment.T["repay"] < assessment.T["deposit"] else "deposit"
    if kind == "repay":
        asset = _largest_debt(acct)
    else:
        asset = _largest_wallet(acct, lambda a: acct.configs.get(a) is not None
                                and acct.configs[a].liquidation_threshold > 0)
    if asset is None:
        return _none("infeasible", {"before": before, "detail": f"nothing to {kind}"})
    max_amount = _max_possible(acct, kind, asset)
    if not max_amount > 0:
        return _none("infeasible", {"before": before, "detail": f"{kind} maximum is zero"})

    scorer = _Scorer(profile, engines)
    m = to_decimal(params.multiplier)
    alpha = params.alpha_min
    iterations = 0
    while alpha <= max_amount:
        iterations += 1
        after = _counterfactual(profile, scorer, kind, asset, alpha, params.trend)
        if not after.at_risk:
            return Recommendation(kind, asset, alpha, False, iterations, asset,
                                  {"before": before, "after": after.to_json()})
        alpha *= m
    after = _counterfactual(profile, scorer, kind, asset, max_amount, params.trend)
    return Recommendation(kind, asset, max_amount, True, iterations, asset,
                          {"before": before, "after": after.to_json()})


def validate_feasibility(rec: Recommendation, account: Account,
                         dust_threshold: float = 1.0) -> Recommendation:
    """Wallet substitution and atomic dust clearance."""
    if rec.action_kind == "none":
        return rec
    adjustments = list(rec.adjustments)
    wallet = account.wallet
    prices = account.oracle.snapshot(account.time, sorted(account.position.assets
                                                          | {rec.asset, rec.target_asset}))
    target = rec.target_asset
    asset, amount = rec.asset, rec.amount
    if wallet.get(asset, ZERO) < amount:
        src = _largest_wallet(account)
        if src is None:
            return replace(_none("infeasible", dict(rec.rationale)),
                           adjustments=tuple(adjustments + ["no_wallet_balance"]))
        prices.update(account.oracle.snapshot(account.time, [src]))
        swept = wallet[src]
        if rec.action_kind == "repay":
            owed_usd = float(account.position.debt.get(target, ZERO)) * prices[target]
            swept = min(swept, to_decimal(owed_usd / prices[src]))
            if src == target:
                swept = min(swept, account.position.debt.get(target, ZERO))
        else:
            target = src
        adjustments.append(f"substituted {amount} {asset} with {swept} {src}")
        asset, amount = src, swept
    if rec.action_kind == "repay":
        owed = account.position.debt.get(target, ZERO)
        repaid = amount if asset == target else to_decimal(
            float(amount) * prices[asset] / prices[target])
        residual = max(ZERO, owed - repaid)
        other = sum(float(v) * prices[a] for a, v in account.position.debt.items()
                    if v > 0 and a != target)
        residual_usd = float(residual) * prices[target] + other
        if 0 < residual_usd < dust_threshold and residual > 0:
            extra = owed if asset == target else to_decimal(
                float(owed) * prices[target] / prices[asset])
            if wallet.get(asset, ZERO) >= extra:
                adjustments.append(f"up-sized to full close of {owed} {target}")
                amount = extra
            elif asset == target and _wallet_usd(account) >= float(owed) * prices[target]:
                adjustments.append(f"up-sized to full close of {owed} {target}")
                amount = owed
    if not amount > 0:
        return replace(_none("infeasible", dict(rec.rationale)),
                       adjustments=tuple(adjustments))
    return replace(rec, asset=asset, amount=amount, target_asset=target,
                   adjustments=tuple(adjustments))


# --------------------------------------------------------------------------
# Sensitivity


def sensitivity_stability(profiles: Sequence[ProfileState],
                          engines: Mapping[str, HazardEngine],
                          trend_params: TrendParams = TrendParams(),
                          perturbation: float = 0.1, trials: int = 100,
                          seed: int = 0) -> float:
    """Mean fraction of profiles whose at-risk flag survives relative noise on
    (accel_weight, vol_penalty, momentum)."""
    if not profiles:
        raise AgentConfigError("no profiles")
    if not perturbation > 0:
        raise AgentConfigError("perturbation must be > 0")
    rng = np.random.default_rng(seed)
    scorers = [_Scorer(p, engines) for p in profiles]
    currents = [s.current(p.features, p.t_rec) for s, p in zip(scorers, profiles)]
    base = [s.assess(T, trend_params).at_risk for s, T in zip(scorers, currents)]
    w0 = np.array([trend_params.accel_weight, trend_params.vol_penalty, trend_params.momentum])
    fractions = []
    for _ in range(trials):
        w = w0 * (1.0 + rng.uniform(-perturbation, perturbation, size=3))
        tp = TrendParams(*map(float, w))
        same = sum(s.assess(T, tp).at_risk == b for s, T, b in zip(scorers, currents, base))
        fractions.append(same / len(profiles))
    return float(np.mean(fractions))


def recommendation_report(profile: ProfileState, assessment: RiskAssessment,
                          rec: Recommendation) -> dict:
    return {"user_id": profile.user_id, "t_rec": profile.t_rec,
            "at_risk": assessment.at_risk,
            "T": {e: _num(v) for e, v in assessment.T.items()},
            "V": {e: _num(v.value) for e, v in assessment.V.items()},
            "action": rec.action_kind, "asset": rec.asset, "target_asset": rec.target_asset,
            "amount": str(rec.amount), "iterations": rec.iterations,
            "capped_at_max": rec.capped_at_max, "adjustments": list(rec.adjustments),
            "reason": rec.reason}
