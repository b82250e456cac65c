"""Liquidation detection over a simulated position trajectory.

A :class:`Trajectory` is one segment of a position's life with no user
interaction inside it: balances only change through interest accrual and
values only through oracle price updates. Six strategies scan the segment on
different check schedules. Whenever a check finds the position liquidatable
the strategy bisects, on whole seconds, between the last passing check and
the failing one, so every strategy that sees a crossing reports the same
second. Each strategy returns at most one event per segment: a trajectory
does not model the liquidation itself, the replay harness does.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from .lending import (
    SECONDS_PER_DAY, SECONDS_PER_YEAR, PositionValue, PriceOracle, ReserveConfig,
    ReserveState, UserPosition, borrow_rate, default_dust_threshold, index_at, is_liquidatable,
    position_value, price_at, to_decimal,
)

STRATEGIES = ("event_driven", "adaptive", "binary_search", "hybrid", "model_based",
              "interest_milestones")


class DetectionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MarginPolicy:
    base: float = 1.0
    per_day_increment: float = 0.02
    cap: float = 1.10

    def __post_init__(self):
        if self.per_day_increment < 0 or self.cap < self.base:
            raise DetectionConfigError("need per_day_increment >= 0 and cap >= base")

    @classmethod
    def strict(cls) -> MarginPolicy:
        return cls(1.0, 0.0, 1.0)


def effective_threshold(policy: MarginPolicy, gap_days: float) -> float:
    if gap_days < 0:
        raise DetectionConfigError("gap must be non-negative")
    return min(policy.cap, policy.base + policy.per_day_increment * gap_days)


@dataclass(frozen=True)
class DetectionParams:
    adaptive_base: int = 3600
    hybrid_period: int = 3600
    dense_step: int = 60
    milestone_step: float = 0.001
    dust_ratio: float = 0.99


@dataclass(frozen=True)
class LiquidationEvent:
    time: int
    hf_at_detection: float
    classification: str
    debt_to_cover_ratio: float
    detected_by: frozenset[str] = field(default_factory=frozenset)
    threshold: float = 1.0
    value_usd: float = 0.0

    def to_json(self) -> dict:
        return {"t": self.time, "hf": _finite(self.hf_at_detection),
                "threshold": self.threshold, "classification": self.classification,
                "debt_to_cover_ratio": self.debt_to_cover_ratio,
                "detected_by": sorted(self.detected_by)}


def _finite(x: float):
    return x if math.isfinite(x) else None


class _Growth:
    """Balance multiplier of one reserve side since the segment start."""

    __slots__ = ("rate", "compound")

    def __init__(self, rate: float, compound: bool):
        self.rate, self.compound = rate, compound

    def ratio(self, index0: float, years: float) -> float:
        if self.rate == 0.0 or years == 0.0:
            return 1.0
        return index_at(index0, self.rate, years, self.compound) / index0


class Trajectory:
    """Position evolution over ``[start, end]`` under accrual and price updates."""

    def __init__(self, position: UserPosition, oracle: PriceOracle,
                 configs: Mapping[str, ReserveConfig], start: int, end: int, *,
                 reserves: Mapping[str, ReserveState] | None = None,
                 last_interaction: int | None = None, end_is_event: bool = False,
                 dust_threshold: float | None = None):
        if end < start:
            raise DetectionConfigError("trajectory ends before it starts")
        self.position = position
        self.oracle = oracle
        self.configs = configs
        self.start, self.end = int(start), int(end)
        self.last_interaction = self.start if last_interaction is None else int(last_interaction)
        self.end_is_event = end_is_event
        self.dust_threshold = (default_dust_threshold(position, configs)
                               if dust_threshold is None else dust_threshold)
        reserves = reserves or {}
        self._coll = []
        self._debt = []
        self.max_borrow_rate = 0.0
        for asset, amount in sorted(position.collateral.items()):
            if amount > 0:
                rs, cfg = reserves.get(asset), configs[asset]
                g = self._growth(rs, cfg, supply=True)
                idx0 = rs.liquidity_index if rs else 1.0
                self._coll.append((asset, float(amount), cfg.liquidation_threshold, g, idx0))
        for asset, amount in sorted(position.debt.items()):
            if amount > 0:
                rs, cfg = reserves.get(asset), configs[asset]
                g = self._growth(rs, cfg, supply=False)
                idx0 = rs.borrow_index if rs else 1.0
                self._debt.append((asset, float(amount), g, idx0))
                self.max_borrow_rate = max(self.max_borrow_rate, g.rate)

    @staticmethod
    def _growth(rs: ReserveState | None, cfg: ReserveConfig, supply: bool) -> _Growth:
        if rs is None:
            return _Growth(0.0, False)
        u = rs.utilization
        b = borrow_rate(u, cfg.rate_params)
        if supply:
            return _Growth(b * u, cfg.compound_supply)
        return _Growth(b, cfg.compound_borrow)

    @classmethod
    def from_account(cls, account, end: int, *, end_is_event: bool = False,
                     dust_threshold: float | None = None) -> Trajectory:
        return cls(account.position, account.oracle, account.configs, account.time, end,
                   reserves=account.reserves, last_interaction=account.last_interaction,
                   end_is_event=end_is_event, dust_threshold=dust_threshold)

    @property
    def inert(self) -> bool:
        """No collateral or no debt: nothing can ever be liquidated."""
        return not self._coll or not self._debt

    @property
    def assets(self) -> list[str]:
        return sorted({a for a, *_ in self._coll} | {a for a, *_ in self._debt})

    def update_times(self) -> list[int]:
        return self.oracle.update_times(self.assets, self.start, self.end)

    def value(self, t: int) -> PositionValue:
        years = (t - self.start) / SECONDS_PER_YEAR
        coll = weighted = debt = 0.0
        for asset, amount, lt, g, idx0 in self._coll:
            usd = amount * g.ratio(idx0, years) * price_at(self.oracle, asset, t)
            coll += usd
            weighted += usd * lt
        for asset, amount, g, idx0 in self._debt:
            debt += amount * g.ratio(idx0, years) * price_at(self.oracle, asset, t)
        return PositionValue(coll, weighted, debt)

    def health_factor(self, t: int) -> float:
        return self.value(t).health_factor

    def threshold(self, t: int, policy: MarginPolicy) -> float:
        return effective_threshold(policy, max(0, t - self.last_interaction) / SECONDS_PER_DAY)

    def liquidatable(self, t: int, policy: MarginPolicy) -> bool:
        return is_liquidatable(self.value(t), self.threshold(t, policy), self.dust_threshold)

    def position_at(self, t: int) -> UserPosition:
        years = (t - self.start) / SECONDS_PER_YEAR
        coll = {a: self.position.collateral[a] if g.rate == 0 else
                self.position.collateral[a] * to_decimal(g.ratio(idx0, years))
                for a, _, _, g, idx0 in self._coll}
        debt = {a: self.position.debt[a] if g.rate == 0 else
                self.position.debt[a] * to_decimal(g.ratio(idx0, years))
                for a, _, g, idx0 in self._debt}
        return UserPosition(coll, debt, t)

    def prices_at(self, t: int) -> dict[str, float]:
        return {a: price_at(self.oracle, a, t) for a in self.assets}


# --------------------------------------------------------------------------
# Check schedules


class _Schedule:
    """Yields check times in increasing order; ``after(t, tr)`` gives the next one."""

    def __init__(self, points: Sequence[int]):
        self.points = sorted(set(points))
        self._i = 0

    def after(self, t: int, traj: Trajectory, policy: MarginPolicy) -> int | None:
        while self._i < len(self.points) and self.points[self._i] <= t:
            self._i += 1
        return self.points[self._i] if self._i < len(self.points) else None


def _event_points(traj: Trajectory) -> list[int]:
    pts = [traj.start, *traj.update_times()]
    if traj.end_is_event:
        pts.append(traj.end)
    return pts


class _Adaptive:
    """Time steps shrinking linearly as HF approaches 1.0; a keeper is woken by
    every oracle update as well.

    The step scales with ``HF - 1`` rather than with the distance to the
    dynamic threshold: a position parked just above a capped threshold would
    otherwise be polled every second for days.
    """

    def __init__(self, base: int, updates: Sequence[int]):
        self.base = base
        self.updates = _Schedule(updates)

    def after(self, t, traj, policy):
        if t >= traj.end:
            return None
        margin = traj.health_factor(t) - 1.0
        step = self.base if not math.isfinite(margin) else math.ceil(self.base * margin / 0.5)
        nxt = min(traj.end, t + max(1, min(self.base, step)))
        upd = self.updates.after(t, traj, policy)
        return nxt if upd is None else min(nxt, upd)


class _ModelBased:
    """Coarse checks at price updates; dense checks where a linear fit of the
    margin over the last two checks predicts a crossing before the next coarse point."""

    def __init__(self, coarse: Sequence[int], dense_step: int):
        self.coarse = _Schedule(coarse)
        self.dense_step = dense_step
        self.prev: tuple[int, float] | None = None

    def after(self, t, traj, policy):
        margin = traj.health_factor(t) - traj.threshold(t, policy)
        nxt = self.coarse.after(t, traj, policy)
        prev, self.prev = self.prev, (t, margin)
        if nxt is None or prev is None or not math.isfinite(margin) \
                or not math.isfinite(prev[1]) or t == prev[0]:
            return nxt
        slope = (margin - prev[1]) / (t - prev[0])
        if slope < 0 and t + margin / -slope <= nxt:
            return min(nxt, t + self.dense_step)
        return nxt


def _milestone_points(traj: Trajectory, step: float) -> list[int]:
    r = traj.max_borrow_rate
    if r <= 0 or traj.end <= traj.start:
        return []
    dt = math.log1p(step) / r * SECONDS_PER_YEAR
    n = int((traj.end - traj.start) / dt)
    return [traj.start + math.ceil(k * dt) for k in range(1, n + 1)]


def _schedule(strategy: str, traj: Trajectory, params: DetectionParams):
    events = _event_points(traj)
    coarse = [traj.start, *traj.update_times(), traj.end]
    if strategy == "event_driven":
        return _Schedule(events)
    if strategy == "adaptive":
        return _Adaptive(params.adaptive_base, traj.update_times())
    if strategy == "binary_search":
        return _Schedule(coarse)
    if strategy == "hybrid":
        grid = range(traj.start, traj.end + 1, params.hybrid_period)
        return _Schedule([*events, *grid])
    if strategy == "model_based":
        return _ModelBased(coarse, params.dense_step)
    if strategy == "interest_milestones":
        return _Schedule([*events, *_milestone_points(traj, params.milestone_step)])
    raise DetectionConfigError(f"unknown strategy {strategy!r}")


def _bisect(traj: Trajectory, policy: MarginPolicy, lo: int, hi: int) -> int:
    """First failing second in ``(lo, hi]`` given lo passes and hi fails."""
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if traj.liquidatable(mid, policy):
            hi = mid
        else:
            lo = mid
    return hi


def classify(event_or_ratio, position: UserPosition, prices: Mapping[str, float],
             dust_threshold: float, dust_ratio: float = 0.99) -> str:
    """``dust`` when the position is below the dust threshold and the liquidation
    covers (nearly) all of the debt; ``insolvency`` otherwise."""
    ratio = getattr(event_or_ratio, "debt_to_cover_ratio", event_or_ratio)
    coll = sum(float(v) * prices[a] for a, v in position.collateral.items() if v > 0)
    debt = sum(float(v) * prices[a] for a, v in position.debt.items() if v > 0)
    if coll + debt < dust_threshold and ratio >= dust_ratio:
        return "dust"
    return "insolvency"


def describe_liquidation(traj: Trajectory, t: int, policy: MarginPolicy,
                         strategies: frozenset[str] = frozenset(),
                         dust_ratio: float = 0.99) -> LiquidationEvent:
    from .simulator import liquidate_lenient

    pos = traj.position_at(t)
    prices = traj.prices_at(t)
    thr = traj.threshold(t, policy)
    result = liquidate_lenient(pos, prices, traj.configs, thr, traj.dust_threshold)
    v = position_value(pos, prices, traj.configs)
    return LiquidationEvent(
        time=t, hf_at_detection=v.health_factor,
        classification=classify(result, pos, prices, traj.dust_threshold, dust_ratio),
        debt_to_cover_ratio=result.debt_to_cover_ratio, detected_by=strategies,
        threshold=thr, value_usd=v.dust_value_usd)


def first_crossing(strategy: str, traj: Trajectory, policy: MarginPolicy = MarginPolicy(),
                   params: DetectionParams = DetectionParams()) -> int | None:
    """Second of the first liquidatable state this strategy finds, or None."""
    if traj.inert:
        return None
    sched = _schedule(strategy, traj, params)
    t = traj.start
    if traj.liquidatable(t, policy):
        return t
    while True:
        nxt = sched.after(t, traj, policy)
        if nxt is None or nxt > traj.end:
            return None
        if traj.liquidatable(nxt, policy):
            return _bisect(traj, policy, t, nxt)
        t = nxt


def detect(strategy: str, traj: Trajectory, policy: MarginPolicy = MarginPolicy(),
           params: DetectionParams = DetectionParams()) -> list[LiquidationEvent]:
    if strategy not in STRATEGIES:
        raise DetectionConfigError(f"unknown strategy {strategy!r}")
    t = first_crossing(strategy, traj, policy, params)
    if t is None:
        return []
    return [describe_liquidation(traj, t, policy, frozenset({strategy}), params.dust_ratio)]


def detect_all(traj: Trajectory, policy: MarginPolicy = MarginPolicy(),
               params: DetectionParams = DetectionParams()) -> list[list[LiquidationEvent]]:
    """All six strategies, sharing event construction for identical crossing times."""
    cache: dict[int, LiquidationEvent] = {}
    out = []
    for s in STRATEGIES:
        t = first_crossing(s, traj, policy, params)
        if t is None:
            out.append([])
            continue
        if t not in cache:
            cache[t] = describe_liquidation(traj, t, policy, frozenset(), params.dust_ratio)
        ev = cache[t]
        out.append([LiquidationEvent(ev.time, ev.hf_at_detection, ev.classification,
                                     ev.debt_to_cover_ratio, frozenset({s}), ev.threshold,
                                     ev.value_usd)])
    return out


@dataclass(frozen=True)
class ConsensusResult:
    confirmed: list[LiquidationEvent]
    candidates: list[LiquidationEvent]
    agreement: float

    def to_json(self) -> dict:
        return {"candidates": [c.to_json() for c in self.candidates],
                "confirmed": [c.to_json() for c in self.confirmed],
                "agreement": self.agreement}


def consensus(results: Sequence[Sequence[LiquidationEvent]],
              time_tolerance: float = 2.0) -> ConsensusResult:
    """Merge events within ``time_tolerance`` of a cluster's first event; confirm
    clusters that contain an event from every one of the six inputs."""
    if len(results) != len(STRATEGIES):
        raise DetectionConfigError(f"consensus needs exactly {len(STRATEGIES)} result lists")
    tagged = sorted(((ev.time, sorted(ev.detected_by), i, ev)
                     for i, evs in enumerate(results) for ev in evs),
                    key=lambda x: (x[0], x[1], x[2]))
    clusters: list[list[tuple]] = []
    for item in tagged:
        if clusters and item[0] - clusters[-1][0][0] <= time_tolerance:
            clusters[-1].append(item)
        else:
            clusters.append([item])
    candidates, confirmed = [], []
    for cl in clusters:
        first = cl[0][3]
        by = frozenset().union(*(it[3].detected_by for it in cl))
        merged = LiquidationEvent(first.time, first.hf_at_detection, first.classification,
                                  first.debt_to_cover_ratio, by, first.threshold,
                                  first.value_usd)
        candidates.append(merged)
        if {it[2] for it in cl} == set(range(len(STRATEGIES))):
            confirmed.append(merged)
    agreement = len(confirmed) / len(candidates) if candidates else 1.0
    return ConsensusResult(confirmed, candidates, agreement)


def flagged(traj: Trajectory, policy: MarginPolicy,
            strategies: Sequence[str] = ("event_driven", "binary_search"),
            params: DetectionParams = DetectionParams()) -> bool:
    """Whether any of ``strategies`` detects a liquidation on the trajectory."""
    return any(first_crossing(s, traj, policy, params) is not None for s in strategies)


__all__ = [
    "STRATEGIES", "MarginPolicy", "DetectionParams", "LiquidationEvent", "Trajectory",
    "ConsensusResult", "effective_threshold", "detect", "detect_all", "consensus",
    "classify", "first_crossing", "flagged", "describe_liquidation",
]
