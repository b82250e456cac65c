"""Over-collateralized lending pool model.

Reserves with a kinked (two-slope) borrow rate, index-based interest
accrual, per-user positions, health factors and close-factor liquidation.

Native balances are ``Decimal``; USD aggregates are floats. Liquidation
comparisons are done in USD with an absolute epsilon of ``LIQUIDATION_EPS_USD``.
"""

from __future__ import annotations

import bisect
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path

SECONDS_PER_YEAR = 365 * 86400
SECONDS_PER_DAY = 86400
LIQUIDATION_EPS_USD = 1e-9

#: Health factor of a position without debt. Compares greater than any finite HF.
NO_DEBT = math.inf

ZERO = Decimal(0)

ACTION_KINDS = ("deposit", "withdraw", "borrow", "repay")


class LendingError(Exception):
    """Base class for lending-model errors."""


class DomainError(LendingError, ValueError):
    pass


class TimeTravelError(LendingError, ValueError):
    pass


class MissingDataError(LendingError, LookupError):
    """A price or reserve config is missing for an asset."""

    def __init__(self, asset: str, what: str = "price"):
        super().__init__(f"no {what} for asset {asset!r}")
        self.asset = asset


class ActionRejected(LendingError):
    """A user action cannot be executed; ``reason`` is machine-readable."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ProtocolError(LendingError):
    pass


def to_decimal(value) -> Decimal:
    if isinstance(value, Decimal):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise DomainError(f"non-finite amount {value!r}")
        return Decimal(repr(value))
    return Decimal(value)


# --------------------------------------------------------------------------
# Reserve configuration and interest


@dataclass(frozen=True)
class RateParams:
    base_rate: float = 0.0
    slope1: float = 0.04
    slope2: float = 0.60
    optimal_utilization: float = 0.80

    def __post_init__(self):
        if not 0.0 < self.optimal_utilization < 1.0:
            raise DomainError("optimal_utilization must be in (0, 1)")
        if min(self.base_rate, self.slope1, self.slope2) < 0:
            raise DomainError("rates must be non-negative")


@dataclass(frozen=True)
class ReserveConfig:
    asset: str
    ltv: float
    liquidation_threshold: float
    liquidation_bonus: float = 0.05
    close_factor: float = 0.5
    dust_threshold_usd: float = 1.0
    rate_params: RateParams = field(default_factory=RateParams)
    # Debt compounds continuously; supply accrues simple interest.
    compound_borrow: bool = True
    compound_supply: bool = False

    def __post_init__(self):
        if not 0.0 <= self.ltv <= self.liquidation_threshold < 1.0:
            raise DomainError(f"{self.asset}: need 0 <= ltv <= liquidation_threshold < 1")
        if self.liquidation_bonus < 0:
            raise DomainError(f"{self.asset}: liquidation_bonus must be >= 0")
        if not 0.0 < self.close_factor <= 1.0:
            raise DomainError(f"{self.asset}: close_factor must be in (0, 1]")
        if not self.dust_threshold_usd > 0:
            raise DomainError(f"{self.asset}: dust_threshold_usd must be > 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> ReserveConfig:
        d = dict(d)
        rp = d.pop("rate_params", None)
        if rp is not None and not isinstance(rp, RateParams):
            rp = RateParams(**rp)
        if rp is not None:
            d["rate_params"] = rp
        return cls(**d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["rate_params"] = dict(self.rate_params.__dict__)
        return d


def load_reserve_configs(path: str | Path) -> dict[str, ReserveConfig]:
    """Read a JSON array of reserve config objects keyed by ``asset``."""
    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    configs = {}
    for item in items:
        cfg = ReserveConfig.from_dict(item)
        configs[cfg.asset] = cfg
    return configs


def borrow_rate(utilization: float, params: RateParams) -> float:
    """Annual borrow rate for a utilization in [0, 1]."""
    u = utilization
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"utilization {u!r} outside [0, 1]")
    u_opt = params.optimal_utilization
    if u <= u_opt:
        return params.base_rate + params.slope1 * (u / u_opt)
    return params.base_rate + params.slope1 + params.slope2 * (u - u_opt) / (1.0 - u_opt)


@dataclass(frozen=True)
class ReserveState:
    total_liquidity: float
    total_debt: float
    liquidity_index: float = 1.0
    borrow_index: float = 1.0
    last_accrual: int = 0

    @classmethod
    def at_utilization(cls, utilization: float, last_accrual: int = 0,
                       size: float = 1e9) -> ReserveState:
        if not 0.0 <= utilization <= 1.0:
            raise DomainError(f"utilization {utilization!r} outside [0, 1]")
        return cls(total_liquidity=size * (1.0 - utilization),
                   total_debt=size * utilization, last_accrual=last_accrual)

    @property
    def utilization(self) -> float:
        total = self.total_liquidity + self.total_debt
        return self.total_debt / total if total > 0 else 0.0


def index_at(index: float, rate: float, years: float, compound: bool) -> float:
    """Advance an index; compound mode is multiplicative, linear mode additive."""
    if compound:
        return index * math.exp(rate * years)
    return index + rate * years


def accrue(state: ReserveState, config: ReserveConfig, now: int) -> ReserveState:
    """Accrue interest on both indexes from ``state.last_accrual`` up to ``now``.

    Rates are evaluated at the utilization at the start of the interval.
    """
    if now < state.last_accrual:
        raise TimeTravelError(f"accrue to {now} before last accrual {state.last_accrual}")
    if now == state.last_accrual:
        return state
    years = (now - state.last_accrual) / SECONDS_PER_YEAR
    u = state.utilization
    b_rate = borrow_rate(u, config.rate_params)
    s_rate = b_rate * u
    return replace(
        state,
        borrow_index=index_at(state.borrow_index, b_rate, years, config.compound_borrow),
        liquidity_index=index_at(state.liquidity_index, s_rate, years, config.compound_supply),
        last_accrual=now,
    )


# --------------------------------------------------------------------------
# Prices


@dataclass(frozen=True)
class PriceOracle:
    """Step-function USD prices per asset."""

    times: Mapping[str, tuple[int, ...]]
    prices: Mapping[str, tuple[float, ...]]
    conflicts: int = field(default=0, compare=False)

    @classmethod
    def from_series(cls, series: Mapping[str, Iterable[tuple[int, float]]],
                    conflicts: int = 0) -> PriceOracle:
        times, prices = {}, {}
        for asset, obs in series.items():
            obs = list(obs)
            ts = tuple(int(t) for t, _ in obs)
            ps = tuple(float(p) for _, p in obs)
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise DomainError(f"{asset}: timestamps must be strictly increasing")
            if any(not p > 0 for p in ps):
                raise DomainError(f"{asset}: prices must be positive")
            if ts:
                times[asset], prices[asset] = ts, ps
        return cls(times, prices, conflicts)

    @property
    def assets(self) -> list[str]:
        return sorted(self.times)

    def series(self, asset: str) -> list[tuple[int, float]]:
        return list(zip(self.times[asset], self.prices[asset]))

    def first_time(self, asset: str) -> int:
        if asset not in self.times:
            raise MissingDataError(asset)
        return self.times[asset][0]

    def snapshot(self, t: int, assets: Iterable[str] | None = None) -> dict[str, float]:
        """Prices of ``assets`` (default: all with history at ``t``) at time ``t``."""
        if assets is None:
            assets = [a for a in self.times if self.times[a][0] <= t]
        return {a: price_at(self, a, t) for a in assets}

    def update_times(self, assets: Iterable[str], start: int, end: int) -> list[int]:
        """Sorted unique observation times in ``(start, end]`` for ``assets``."""
        out: set[int] = set()
        for a in assets:
            ts = self.times.get(a)
            if not ts:
                continue
            lo = bisect.bisect_right(ts, start)
            hi = bisect.bisect_right(ts, end)
            out.update(ts[lo:hi])
        return sorted(out)


def price_at(oracle: PriceOracle, asset: str, t: int) -> float:
    """Last observed price of ``asset`` at or before ``t``."""
    ts = oracle.times.get(asset)
    if not ts:
        raise MissingDataError(asset)
    i = bisect.bisect_right(ts, t) - 1
    if i < 0:
        raise MissingDataError(asset, f"price at or before t={t}")
    return oracle.prices[asset][i]


# --------------------------------------------------------------------------
# Positions


@dataclass(frozen=True)
class UserPosition:
    collateral: Mapping[str, Decimal] = field(default_factory=dict)
    debt: Mapping[str, Decimal] = field(default_factory=dict)
    last_update: int = 0

    def __post_init__(self):
        for book in (self.collateral, self.debt):
            for asset, amount in book.items():
                if amount < 0:
                    raise DomainError(f"negative balance for {asset}")

    @property
    def assets(self) -> set[str]:
        return {a for a, v in self.collateral.items() if v > 0} | {
            a for a, v in self.debt.items() if v > 0}

    @property
    def has_debt(self) -> bool:
        return any(v > 0 for v in self.debt.values())

    def with_balance(self, book: str, asset: str, amount: Decimal) -> UserPosition:
        balances = dict(getattr(self, book))
        if amount == 0:
            balances.pop(asset, None)
        else:
            balances[asset] = amount
        return replace(self, **{book: balances})


@dataclass(frozen=True)
class PositionValue:
    collateral_usd: float
    weighted_collateral_usd: float
    debt_usd: float

    @property
    def health_factor(self) -> float:
        if self.debt_usd <= 0:
            return NO_DEBT
        return self.weighted_collateral_usd / self.debt_usd

    @property
    def dust_value_usd(self) -> float:
        """Gross position value (collateral plus debt) compared against the dust threshold."""
        return self.collateral_usd + self.debt_usd


@dataclass(frozen=True)
class PositionSnapshot:
    """Scalar state summary used as model features."""

    health_factor: float
    collateral_usd: float
    debt_usd: float


def _lookup(mapping, asset, what):
    try:
        return mapping[asset]
    except KeyError:
        raise MissingDataError(asset, what) from None


def position_value(position: UserPosition, prices: Mapping[str, float],
                   configs: Mapping[str, ReserveConfig]) -> PositionValue:
    coll = weighted = debt = 0.0
    for asset, amount in position.collateral.items():
        if amount <= 0:
            continue
        usd = float(amount) * _lookup(prices, asset, "price")
        coll += usd
        weighted += usd * _lookup(configs, asset, "reserve config").liquidation_threshold
    for asset, amount in position.debt.items():
        if amount <= 0:
            continue
        _lookup(configs, asset, "reserve config")
        debt += float(amount) * _lookup(prices, asset, "price")
    return PositionValue(coll, weighted, debt)


def health_factor(position: UserPosition, prices: Mapping[str, float],
                  configs: Mapping[str, ReserveConfig]) -> float:
    """LT-weighted collateral USD over debt USD; ``NO_DEBT`` without debt."""
    return position_value(position, prices, configs).health_factor


def snapshot(position: UserPosition, prices: Mapping[str, float],
             configs: Mapping[str, ReserveConfig]) -> PositionSnapshot:
    v = position_value(position, prices, configs)
    return PositionSnapshot(v.health_factor, v.collateral_usd, v.debt_usd)


@dataclass(frozen=True)
class UserAction:
    kind: str
    asset: str
    amount: Decimal

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise DomainError(f"unknown action kind {self.kind!r}")
        object.__setattr__(self, "amount", to_decimal(self.amount))


def apply_user_action(position: UserPosition, wallet: Mapping[str, Decimal],
                      action: UserAction, prices: Mapping[str, float] | None = None,
                      configs: Mapping[str, ReserveConfig] | None = None,
                      *, enforce_health: bool = True,
                      ) -> tuple[UserPosition, dict[str, Decimal]]:
    """Apply a deposit/withdraw/borrow/repay and return the new position and wallet.

    Withdraws and borrows that would leave HF below 1.0 are rejected when
    ``enforce_health`` is set (prices and configs are then required).
    Repays larger than the outstanding debt repay exactly the debt.
    """
    amount = action.amount
    if not amount > 0:
        raise ActionRejected("non_positive_amount", f"{amount}")
    asset = action.asset
    wallet = dict(wallet)
    held = wallet.get(asset, ZERO)

    if action.kind == "deposit":
        if held < amount:
            raise ActionRejected("insufficient_wallet", f"{asset}: have {held}, need {amount}")
        new_pos = position.with_balance(
            "collateral", asset, position.collateral.get(asset, ZERO) + amount)
        wallet[asset] = held - amount
        return new_pos, wallet

    if action.kind == "repay":
        owed = position.debt.get(asset, ZERO)
        paid = min(amount, owed)
        if held < paid:
            raise ActionRejected("insufficient_wallet", f"{asset}: have {held}, need {paid}")
        wallet[asset] = held - paid
        return position.with_balance("debt", asset, owed - paid), wallet

    if action.kind == "withdraw":
        supplied = position.collateral.get(asset, ZERO)
        if supplied < amount:
            raise ActionRejected("insufficient_collateral",
                                 f"{asset}: have {supplied}, need {amount}")
        new_pos = position.with_balance("collateral", asset, supplied - amount)
        wallet[asset] = held + amount
    else:  # borrow
        new_pos = position.with_balance("debt", asset, position.debt.get(asset, ZERO) + amount)
        wallet[asset] = held + amount

    if enforce_health and new_pos.has_debt:
        if prices is None or configs is None:
            raise ValueError("prices and configs are required to check health")
        v = position_value(new_pos, prices, configs)
        if v.weighted_collateral_usd < v.debt_usd - LIQUIDATION_EPS_USD:
            raise ActionRejected("health_factor_below_one",
                                 f"{action.kind} would leave HF={v.health_factor:.6f}")
    return new_pos, wallet


# --------------------------------------------------------------------------
# Liquidation


@dataclass(frozen=True)
class LiquidationResult:
    debt_repaid_usd: float
    collateral_seized_usd: float
    full_close: bool
    position: UserPosition
    debt_asset: str | None = None
    collateral_asset: str | None = None
    debt_usd_before: float = 0.0

    @property
    def debt_to_cover_ratio(self) -> float:
        if self.debt_usd_before <= 0:
            return 0.0
        return min(1.0, self.debt_repaid_usd / self.debt_usd_before)


def default_dust_threshold(position: UserPosition,
                           configs: Mapping[str, ReserveConfig]) -> float:
    """Largest dust threshold among the position's assets (1.0 if none)."""
    values = [configs[a].dust_threshold_usd for a in position.assets if a in configs]
    return max(values, default=1.0)


def is_liquidatable(value: PositionValue, threshold: float = 1.0,
                    dust_threshold: float = 1.0) -> bool:
    """Debt and collateral present, and either HF below threshold or dust-sized."""
    if value.debt_usd <= LIQUIDATION_EPS_USD or value.collateral_usd <= LIQUIDATION_EPS_USD:
        return False
    if value.weighted_collateral_usd < threshold * value.debt_usd - LIQUIDATION_EPS_USD:
        return True
    return value.dust_value_usd < dust_threshold


def _largest(book: Mapping[str, Decimal], prices: Mapping[str, float]) -> str:
    # ties broken by asset symbol for determinism
    return max((a for a, v in book.items() if v > 0),
               key=lambda a: (float(book[a]) * prices[a], a))


def execute_liquidation(position: UserPosition, prices: Mapping[str, float],
                        configs: Mapping[str, ReserveConfig], threshold: float = 1.0,
                        dust_threshold: float | None = None) -> LiquidationResult:
    """Liquidate a position that is below ``threshold`` or dust-sized.

    Standard case repays ``close_factor`` of the largest-USD debt and seizes
    that value plus the collateral's bonus from the largest-USD collateral.
    Dust positions are closed in full.
    """
    if dust_threshold is None:
        dust_threshold = default_dust_threshold(position, configs)
    value = position_value(position, prices, configs)
    if not is_liquidatable(value, threshold, dust_threshold):
        raise ProtocolError(
            f"position is not liquidatable (HF={value.health_factor:.6f}, "
            f"collateral ${value.collateral_usd:.2f}, debt ${value.debt_usd:.2f})")

    if value.dust_value_usd < dust_threshold:
        return LiquidationResult(
            debt_repaid_usd=value.debt_usd, collateral_seized_usd=value.collateral_usd,
            full_close=True, position=replace(position, collateral={}, debt={}),
            debt_usd_before=value.debt_usd)

    debt_asset = _largest(position.debt, prices)
    coll_asset = _largest(position.collateral, prices)
    p_debt, p_coll = prices[debt_asset], prices[coll_asset]
    bonus = configs[coll_asset].liquidation_bonus
    owed = position.debt[debt_asset]
    supplied = position.collateral[coll_asset]

    repay_native = owed * to_decimal(configs[debt_asset].close_factor)
    repaid_usd = float(repay_native) * p_debt
    seize_usd = repaid_usd * (1.0 + bonus)
    seize_native = to_decimal(seize_usd / p_coll)
    if seize_native >= supplied:
        seize_native = supplied
        seize_usd = float(supplied) * p_coll
        repaid_usd = seize_usd / (1.0 + bonus)
        repay_native = min(owed, to_decimal(repaid_usd / p_debt))
    new_pos = position.with_balance("debt", debt_asset, owed - repay_native)
    new_pos = new_pos.with_balance("collateral", coll_asset, supplied - seize_native)
    return LiquidationResult(
        debt_repaid_usd=repaid_usd, collateral_seized_usd=seize_usd, full_close=False,
        position=new_pos, debt_asset=debt_asset, collateral_asset=coll_asset,
        debt_usd_before=value.debt_usd)
