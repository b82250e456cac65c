"""Index-event -> outcome-event survival records and their feature vectors."""

from __future__ import annotations

import bisect
import csv
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingestion import EVENT_TYPES, EventLog, TxRecord
from .lending import SECONDS_PER_DAY, PositionSnapshot

HF_FEATURE_CAP = 100.0

TASKS = tuple((a, b) for a in EVENT_TYPES for b in EVENT_TYPES)


@dataclass(frozen=True)
class FeatureConfig:
    days_since_cap: float = 365.0
    market_window_days: float = 30.0


def feature_names(config: FeatureConfig = FeatureConfig()) -> list[str]:
    names = []
    for e in EVENT_TYPES:
        cap = e.capitalize()
        names += [f"user{cap}Count", f"user{cap}SumUSD"]
    names += [f"daysSince{e.capitalize()}" for e in EVENT_TYPES]
    names += ["logAmountUSD", "marketLiquidationCount30d",
              "sinTimeOfDay", "cosTimeOfDay", "sinDayOfWeek", "cosDayOfWeek"]
    names += [f"index{e.capitalize()}" for e in EVENT_TYPES]
    names += ["logHealthFactor", "logCollateralUSD", "logDebtUSD"]
    return names


def write_feature_manifest(path: str | Path, config: FeatureConfig = FeatureConfig()) -> None:
    data = {"features": feature_names(config),
            "days_since_cap": config.days_since_cap,
            "market_window_days": config.market_window_days,
            "std": "population", "time_zone": "UTC"}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EventPairTask:
    index_event: str
    outcome_event: str

    def __post_init__(self):
        for e in (self.index_event, self.outcome_event):
            if e not in EVENT_TYPES:
                raise ValueError(f"unknown event type {e!r}")

    @property
    def name(self) -> str:
        return f"{self.index_event}->{self.outcome_event}"


@dataclass(frozen=True, eq=False)
class SurvivalRecord:
    user_id: str
    index_time: int
    duration: float
    event: int
    features: np.ndarray
    index_event: str = ""

    @property
    def key(self) -> tuple[str, int]:
        return (self.user_id, self.index_time)


class MarketHistory:
    """Sorted timestamps of every liquidation in the market."""

    def __init__(self, liquidation_times: Iterable[int] = ()):
        self.liquidation_times = sorted(int(t) for t in liquidation_times)

    @classmethod
    def from_records(cls, records: Iterable[TxRecord]) -> MarketHistory:
        return cls(r.timestamp for r in records if r.event_type == "liquidation")

    def liquidations_between(self, lo: float, hi: float) -> int:
        """Count with ``lo < t <= hi``."""
        ts = self.liquidation_times
        return bisect.bisect_right(ts, hi) - bisect.bisect_right(ts, lo)


class _UserStats:
    __slots__ = ("count", "sum_usd", "last")

    def __init__(self):
        self.count = dict.fromkeys(EVENT_TYPES, 0)
        self.sum_usd = dict.fromkeys(EVENT_TYPES, 0.0)
        self.last: dict[str, int] = {}

    def add(self, ev: TxRecord) -> None:
        self.count[ev.event_type] += 1
        self.sum_usd[ev.event_type] += ev.amount_usd
        self.last[ev.event_type] = max(ev.timestamp, self.last.get(ev.event_type, ev.timestamp))


def _vector(stats: _UserStats, market: MarketHistory, t: int, current_tx: TxRecord | None,
            position: PositionSnapshot | None, config: FeatureConfig) -> np.ndarray:
    out = []
    for e in EVENT_TYPES:
        out += [float(stats.count[e]), stats.sum_usd[e]]
    for e in EVENT_TYPES:
        last = stats.last.get(e)
        days = config.days_since_cap if last is None else min(
            config.days_since_cap, (t - last) / SECONDS_PER_DAY)
        out.append(days)
    out.append(math.log1p(current_tx.amount_usd) if current_tx is not None else 0.0)
    out.append(float(market.liquidations_between(
        t - config.market_window_days * SECONDS_PER_DAY, t)))
    day_phase = 2 * math.pi * (t % SECONDS_PER_DAY) / SECONDS_PER_DAY
    # 1970-01-01 was a Thursday; Monday is day 0
    dow = ((t // SECONDS_PER_DAY) + 3) % 7
    week_phase = 2 * math.pi * dow / 7
    out += [math.sin(day_phase), math.cos(day_phase), math.sin(week_phase), math.cos(week_phase)]
    out += [1.0 if current_tx is not None and current_tx.event_type == e else 0.0
            for e in EVENT_TYPES]
    if position is None:
        out += [math.log(HF_FEATURE_CAP), 0.0, 0.0]
    else:
        hf = min(position.health_factor, HF_FEATURE_CAP)
        out += [math.log(max(hf, 1e-12)), math.log1p(position.collateral_usd),
                math.log1p(position.debt_usd)]
    return np.asarray(out, dtype=float)


def build_features(user_history: Sequence[TxRecord], market_history: MarketHistory,
                   t: int, current_tx: TxRecord | None,
                   position: PositionSnapshot | None = None,
                   config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature vector at time ``t`` in ``feature_names`` order.

    Only data with timestamp <= t is used; later entries of the inputs are ignored.
    """
    stats = _UserStats()
    for ev in user_history:
        if ev.timestamp <= t:
            stats.add(ev)
    return _vector(stats, market_history, t, current_tx, position, config)


def _user_feature_rows(events: Sequence[TxRecord], market: MarketHistory,
                       snapshots: Sequence[PositionSnapshot] | None,
                       config: FeatureConfig) -> list[np.ndarray]:
    stats = _UserStats()
    rows = []
    for i, ev in enumerate(events):
        stats.add(ev)
        snap = snapshots[i] if snapshots is not None else None
        rows.append(_vector(stats, market, ev.timestamp, ev, snap, config))
    return rows


def _pairs_for_user(events, rows, task: EventPairTask, window_end: int, user_id: str):
    out = []
    times = [e.timestamp for e in events]
    for i, ev in enumerate(events):
        if ev.event_type != task.index_event:
            continue
        t0 = ev.timestamp
        j = bisect.bisect_right(times, t0)
        outcome_t = next((events[k].timestamp for k in range(j, len(events))
                          if events[k].event_type == task.outcome_event), None)
        if outcome_t is not None and outcome_t <= window_end:
            duration, observed = (outcome_t - t0) / SECONDS_PER_DAY, 1
        else:
            duration, observed = (window_end - t0) / SECONDS_PER_DAY, 0
        if duration <= 0:
            continue
        out.append(SurvivalRecord(user_id, t0, duration, observed, rows[i], ev.event_type))
    return out


def extract_all_pairs(log: EventLog, tasks: Iterable[EventPairTask], window_end: int, *,
                      snapshots: Mapping[str, Sequence[PositionSnapshot]] | None = None,
                      market: MarketHistory | None = None,
                      config: FeatureConfig = FeatureConfig(),
                      ) -> dict[EventPairTask, list[SurvivalRecord]]:
    """Like ``extract_pairs`` for several tasks, sharing the feature computation."""
    tasks = list(tasks)
    out: dict[EventPairTask, list[SurvivalRecord]] = {t: [] for t in tasks}
    if not len(log):
        return out
    if window_end < log.end_time:
        raise ValueError("window_end precedes the last log timestamp")
    if market is None:
        market = MarketHistory.from_records(log)
    for user in log.users:
        events = log.for_user(user)
        snaps = snapshots.get(user) if snapshots is not None else None
        rows = _user_feature_rows(events, market, snaps, config)
        for task in tasks:
            out[task].extend(_pairs_for_user(events, rows, task, window_end, user))
    return out


def extract_pairs(log: EventLog, task: EventPairTask, window_end: int, *,
                  snapshots: Mapping[str, Sequence[PositionSnapshot]] | None = None,
                  market: MarketHistory | None = None,
                  config: FeatureConfig = FeatureConfig()) -> list[SurvivalRecord]:
    """One record per index-event occurrence per user.

    Duration runs to the user's next outcome event strictly after the index
    time; otherwise the record is censored at ``window_end``. Records with a
    zero duration (index event at ``window_end``) are dropped.
    ``snapshots`` maps a user to position summaries aligned with that user's
    events in log order.
    """
    return extract_all_pairs(log, [task], window_end, snapshots=snapshots,
                             market=market, config=config)[task]


def records_to_arrays(records: Sequence[SurvivalRecord]):
    """(X, durations, events, keys) arrays for model fitting."""
    if not records:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0, dtype=int), []
    x = np.vstack([r.features for r in records])
    durations = np.array([r.duration for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=int)
    return x, durations, events, [r.key for r in records]


def write_records_csv(records: Sequence[SurvivalRecord], path: str | Path,
                      header_comment: str | None = None) -> None:
    k = len(records[0].features) if records else len(feature_names())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "index_time", "duration_days", "event"]
                   + [f"f{i}" for i in range(k)])
        for r in records:
            w.writerow([r.user_id, r.index_time, repr(r.duration), r.event]
                       + [repr(float(v)) for v in r.features])
