"""Single-user account simulation driven by transaction records.

An :class:`Account` owns one position and wallet, keeps its reserve indexes
accrued to the account clock, and values everything with the shared global
price oracle. Reserve utilization is held fixed per asset: a single user's
flow does not move the pool.
"""

from __future__ import annotations

import copy
from collections.abc import Mapping, Sequence
from dataclasses import replace
from decimal import Decimal

from .ingestion import TxRecord
from .lending import (
    ZERO, ActionRejected, LiquidationResult, PositionSnapshot, PositionValue, PriceOracle,
    ProtocolError, ReserveConfig, ReserveState, TimeTravelError, UserAction, UserPosition,
    accrue, apply_user_action, execute_liquidation, position_value, to_decimal,
)

DEFAULT_UTILIZATION = 0.8

#: How an account treats actions it cannot execute as given.
#:  strict  - raise ActionRejected
#:  replay  - clamp deposit/repay to the wallet and withdraw to the collateral;
#:            skip actions that would leave HF < 1
#:  history - like replay but without the HF check (historical facts)
MODES = ("strict", "replay", "history")

OK, CLAMPED, SKIPPED = "ok", "clamped", "skipped"


class Account:
    def __init__(self, configs: Mapping[str, ReserveConfig], oracle: PriceOracle,
                 wallet: Mapping[str, Decimal] | None = None, *, start: int,
                 utilization: float | Mapping[str, float] = DEFAULT_UTILIZATION):
        self.configs = configs
        self.oracle = oracle
        self.wallet: dict[str, Decimal] = dict(wallet or {})
        self.time = int(start)
        self.last_interaction = int(start)
        self.position = UserPosition(last_update=self.time)
        self.reserves: dict[str, ReserveState] = {}
        for asset in configs:
            u = utilization.get(asset, DEFAULT_UTILIZATION) if isinstance(
                utilization, Mapping) else utilization
            self.reserves[asset] = ReserveState.at_utilization(u, last_accrual=self.time)

    def copy(self) -> Account:
        other = copy.copy(self)
        other.wallet = dict(self.wallet)
        other.reserves = dict(self.reserves)
        return other

    # -- time and valuation --------------------------------------------------

    def advance(self, t: int) -> None:
        """Accrue interest up to ``t`` and grow balances with the indexes."""
        t = int(t)
        if t < self.time:
            raise TimeTravelError(f"account at {self.time}, asked for {t}")
        if t == self.time:
            return
        coll = dict(self.position.collateral)
        debt = dict(self.position.debt)
        for asset, old in self.reserves.items():
            new = accrue(old, self.configs[asset], t)
            self.reserves[asset] = new
            if coll.get(asset, ZERO) > 0 and new.liquidity_index != old.liquidity_index:
                coll[asset] *= to_decimal(new.liquidity_index / old.liquidity_index)
            if debt.get(asset, ZERO) > 0 and new.borrow_index != old.borrow_index:
                debt[asset] *= to_decimal(new.borrow_index / old.borrow_index)
        self.position = UserPosition(coll, debt, t)
        self.time = t

    def prices(self, extra: Sequence[str] = ()) -> dict[str, float]:
        return self.oracle.snapshot(self.time, sorted(self.position.assets | set(extra)))

    def value(self) -> PositionValue:
        return position_value(self.position, self.prices(), self.configs)

    def snapshot(self) -> PositionSnapshot:
        v = self.value()
        return PositionSnapshot(v.health_factor, v.collateral_usd, v.debt_usd)

    # -- actions ---------------------------------------------------------------

    def apply(self, action: UserAction, mode: str = "strict") -> str:
        """Execute a user action at the current time; returns ok/clamped/skipped."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        status = OK
        amount = action.amount
        if mode != "strict":
            if action.kind in ("deposit", "repay"):
                held = self.wallet.get(action.asset, ZERO)
                need = amount if action.kind == "deposit" else min(
                    amount, self.position.debt.get(action.asset, ZERO))
                if held < need:
                    amount, status = held, CLAMPED
            elif action.kind == "withdraw":
                supplied = self.position.collateral.get(action.asset, ZERO)
                if supplied < amount:
                    amount, status = supplied, CLAMPED
            if amount <= 0:
                return SKIPPED
            if action.kind == "repay" and self.position.debt.get(action.asset, ZERO) <= 0:
                return SKIPPED
            action = replace(action, amount=amount)
        try:
            self.position, self.wallet = apply_user_action(
                self.position, self.wallet, action, self.prices([action.asset]), self.configs,
                enforce_health=(mode != "history"))
        except ActionRejected:
            if mode == "strict":
                raise
            return SKIPPED
        self.position = replace(self.position, last_update=self.time)
        self.last_interaction = self.time
        return status

    def apply_recorded_liquidation(self, rec: TxRecord) -> None:
        """Apply a historical liquidation row (seized collateral in ``rec.asset``)."""
        prices = self.prices([rec.asset])
        pos = self.position
        debt_assets = [a for a, v in pos.debt.items() if v > 0]
        if debt_assets and rec.liq_debt_repaid_usd:
            target = max(debt_assets, key=lambda a: (float(pos.debt[a]) * prices[a], a))
            repaid = min(pos.debt[target], to_decimal(rec.liq_debt_repaid_usd / prices[target]))
            pos = pos.with_balance("debt", target, pos.debt[target] - repaid)
        seized_asset = rec.asset
        if pos.collateral.get(seized_asset, ZERO) <= 0 and pos.collateral:
            seized_asset = max(pos.collateral,
                               key=lambda a: (float(pos.collateral[a]) * prices[a], a))
        have = pos.collateral.get(seized_asset, ZERO)
        if have > 0:
            if seized_asset == rec.asset:
                seized = rec.amount
            else:
                seized = to_decimal((rec.liq_collateral_seized_usd or 0.0) / prices[seized_asset])
            pos = pos.with_balance("collateral", seized_asset, have - min(have, seized))
        self.position = pos

    def apply_record(self, rec: TxRecord, mode: str = "history") -> str:
        """Advance to the record's time and apply it."""
        self.advance(rec.timestamp)
        if rec.event_type == "liquidation":
            self.apply_recorded_liquidation(rec)
            return OK
        if rec.amount <= 0:
            return SKIPPED
        return self.apply(UserAction(rec.event_type, rec.asset, rec.amount), mode)

    def liquidate(self, threshold: float = 1.0,
                  dust_threshold: float | None = None) -> LiquidationResult:
        result = liquidate_lenient(self.position, self.prices(), self.configs,
                                   threshold, dust_threshold)
        self.position = replace(result.position, last_update=self.time)
        return result


def liquidate_lenient(position: UserPosition, prices: Mapping[str, float],
                      configs: Mapping[str, ReserveConfig], threshold: float,
                      dust_threshold: float | None) -> LiquidationResult:
    """``execute_liquidation`` that tolerates float/Decimal disagreement at the boundary."""
    try:
        return execute_liquidation(position, prices, configs, threshold, dust_threshold)
    except ProtocolError:
        hf = position_value(position, prices, configs).health_factor
        return execute_liquidation(position, prices, configs,
                                   max(threshold, hf * (1 + 1e-9) + 1e-12), dust_threshold)


def replay_history(events: Sequence[TxRecord], oracle: PriceOracle,
                   configs: Mapping[str, ReserveConfig], wallet: Mapping[str, Decimal],
                   *, until: int | None = None,
                   utilization: float | Mapping[str, float] = DEFAULT_UTILIZATION,
                   ) -> tuple[Account, list[PositionSnapshot]]:
    """Rebuild a user's account from history; one snapshot per applied record."""
    start = events[0].timestamp if events else (until or 0)
    acct = Account(configs, oracle, wallet, start=start, utilization=utilization)
    snaps = []
    for rec in events:
        if until is not None and rec.timestamp > until:
            break
        acct.apply_record(rec, "history")
        snaps.append(acct.snapshot())
    if until is not None:
        acct.advance(max(until, acct.time))
    return acct, snaps


def user_snapshots(log_users: Mapping[str, Sequence[TxRecord]], oracle: PriceOracle,
                   configs: Mapping[str, ReserveConfig],
                   wallets: Mapping[str, Mapping[str, Decimal]],
                   utilization: float | Mapping[str, float] = DEFAULT_UTILIZATION,
                   ) -> dict[str, list[PositionSnapshot]]:
    return {u: replay_history(evs, oracle, configs, wallets.get(u, {}),
                              utilization=utilization)[1]
            for u, evs in log_users.items()}
