"""Paired baseline/intervention replay of user futures and cohort metrics.

Both halves of a pair start from the same reconstructed state at ``t_rec``,
share the oracle and the reserve accrual, and replay the same future user
transactions. Liquidations in the future are produced by the detectors, not
copied from the log; recorded liquidation rows only serve the zero-debt
artifact check.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .agent import (
    AgentParams, Recommendation, apply_recommendation, assess_risk, build_profile, recommend,
    validate_feasibility,
)
from .detection import (
    ConsensusResult, DetectionParams, LiquidationEvent, MarginPolicy, Trajectory, consensus,
    detect_all,
)
from .hazard import HazardEngine
from .ingestion import USER_ACTIONS, EventLog, TxRecord
from .lending import LIQUIDATION_EPS_USD, UserAction, PriceOracle, ReserveConfig
from .simulator import CLAMPED, DEFAULT_UTILIZATION, SKIPPED, Account, replay_history
from .survival import MarketHistory

logger = logging.getLogger(__name__)

EXCLUSION_REASONS = ("zero_debt_artifact", "dust_only", "too_fast")


class ReplayError(Exception):
    pass


@dataclass(frozen=True)
class ReplayConfig:
    block_time: int = 2
    min_lead: int | None = None
    dust_threshold: float = 1.0
    policy: MarginPolicy = field(default_factory=MarginPolicy)
    detection: DetectionParams = field(default_factory=DetectionParams)
    time_tolerance: float = 2.0
    utilization: float = DEFAULT_UTILIZATION
    tail_seconds: int = 0
    max_liquidations: int = 1000

    @property
    def lead(self) -> int:
        return self.block_time if self.min_lead is None else self.min_lead


@dataclass
class ReplayHalf:
    liquidations: list[LiquidationEvent] = field(default_factory=list)
    n_candidates: int = 0
    n_confirmed: int = 0
    skipped: int = 0
    clamped: int = 0
    #: (time, HF) just before the user transactions at each future timestamp
    checkpoints: list[tuple[int, float]] = field(default_factory=list)

    @property
    def liquidated(self) -> bool:
        return bool(self.liquidations)

    @property
    def classification(self) -> str:
        if not self.liquidations:
            return "none"
        if any(ev.classification == "insolvency" for ev in self.liquidations):
            return "insolvency"
        return "dust"

    @property
    def first_liquidation(self) -> int | None:
        return self.liquidations[0].time if self.liquidations else None

    @property
    def agreement(self) -> float:
        return self.n_confirmed / self.n_candidates if self.n_candidates else 1.0


@dataclass
class ReplayOutcome:
    user_id: str
    t_rec: int
    baseline_liquidated: bool | None
    intervention_liquidated: bool | None
    baseline_classification: str
    intervention_classification: str
    action: Recommendation | None
    excluded: str | None = None
    baseline: ReplayHalf | None = None
    intervention: ReplayHalf | None = None
    zero_debt_artifact: bool = False

    @property
    def skipped_futures(self) -> int:
        return self.intervention.skipped if self.intervention else 0

    def to_row(self) -> list:
        a = self.action
        return [self.user_id, self.t_rec, self.excluded or "",
                _flag(self.baseline_liquidated), _flag(self.intervention_liquidated),
                a.action_kind if a else "", a.asset if a else "",
                str(a.amount) if a else "", a.iterations if a else "",
                self.skipped_futures]


CSV_HEADER = ["user_id", "t_rec", "excluded_reason", "baseline_liq", "intervention_liq",
              "action_kind", "asset", "amount", "iterations", "skipped_futures"]


def _flag(x: bool | None) -> str:
    return "" if x is None else str(int(x))


# --------------------------------------------------------------------------
# Single replay half


def _segments(future: Sequence[TxRecord], end: int):
    """(boundary time, user actions at that time) in order, closing at ``end``."""
    by_time: dict[int, list[TxRecord]] = {}
    for r in future:
        by_time.setdefault(r.timestamp, []).append(r)
    out = [(t, [r for r in rs if r.event_type in USER_ACTIONS]) for t, rs in sorted(by_time.items())]
    if not out or out[-1][0] < end:
        out.append((end, []))
    return out


def _run_segment(acct: Account, end: int, end_is_event: bool, cfg: ReplayConfig,
                 half: ReplayHalf) -> None:
    for _ in range(cfg.max_liquidations):
        traj = Trajectory.from_account(acct, end, end_is_event=end_is_event,
                                       dust_threshold=cfg.dust_threshold)
        cons: ConsensusResult = consensus(detect_all(traj, cfg.policy, cfg.detection),
                                          cfg.time_tolerance)
        half.n_candidates += len(cons.candidates)
        half.n_confirmed += len(cons.confirmed)
        if not cons.confirmed:
            acct.advance(end)
            return
        ev = cons.confirmed[0]
        acct.advance(ev.time)
        acct.liquidate(ev.threshold, cfg.dust_threshold)
        half.liquidations.append(ev)
        if ev.time >= end:
            return
    raise ReplayError("liquidation loop did not settle")


def replay_future(acct: Account, future: Sequence[TxRecord], cfg: ReplayConfig,
                  end: int | None = None) -> ReplayHalf:
    """Replay ``future`` on ``acct`` (mutated) with continuous detection."""
    if not future:
        raise ReplayError("profile has no future window")
    if end is None:
        end = max(r.timestamp for r in future) + cfg.tail_seconds
    half = ReplayHalf()
    for t, actions in _segments(future, end):
        if t < acct.time:
            continue
        _run_segment(acct, t, bool(actions), cfg, half)
        half.checkpoints.append((t, acct.value().health_factor))
        for rec in actions:
            if rec.amount <= 0:
                continue
            status = acct.apply(UserAction(rec.event_type, rec.asset, rec.amount), "replay")
            if status == SKIPPED:
                half.skipped += 1
            elif status == CLAMPED:
                half.clamped += 1
    return half


def reconstruct(events: Sequence[TxRecord], t_rec: int, oracle: PriceOracle,
                configs: Mapping[str, ReserveConfig], wallet: Mapping[str, Decimal],
                cfg: ReplayConfig) -> Account:
    hist = [e for e in events if e.timestamp <= t_rec]
    if not hist:
        raise ReplayError("profile has no history at t_rec")
    acct, _ = replay_history(hist, oracle, configs, wallet, until=t_rec,
                             utilization=cfg.utilization)
    return acct


def fork_and_replay(events: Sequence[TxRecord], t_rec: int, oracle: PriceOracle,
                    configs: Mapping[str, ReserveConfig], wallet: Mapping[str, Decimal],
                    action: Recommendation | None = None,
                    cfg: ReplayConfig = ReplayConfig()) -> ReplayHalf:
    """One half of a paired replay: state at ``t_rec``, optional action, future."""
    future = [e for e in events if e.timestamp > t_rec]
    if not future:
        raise ReplayError("profile has no future window")
    acct = reconstruct(events, t_rec, oracle, configs, wallet, cfg)
    if action is not None and action.action_kind != "none":
        apply_recommendation(acct, action, "strict")
    return replay_future(acct, future, cfg)


def zero_debt_artifact(events: Sequence[TxRecord], t_rec: int, oracle: PriceOracle,
                       configs: Mapping[str, ReserveConfig], wallet: Mapping[str, Decimal],
                       cfg: ReplayConfig = ReplayConfig()) -> bool:
    """Whether a recorded liquidation after ``t_rec`` hits a position with no debt
    in the historical reconstruction."""
    if not any(e.event_type == "liquidation" and e.timestamp > t_rec for e in events):
        return False
    acct = Account(configs, oracle, wallet, start=events[0].timestamp,
                   utilization=cfg.utilization)
    for rec in events:
        if rec.event_type == "liquidation" and rec.timestamp > t_rec:
            acct.advance(rec.timestamp)
            if acct.value().debt_usd <= LIQUIDATION_EPS_USD:
                return True
        acct.apply_record(rec, "history")
    return False


# --------------------------------------------------------------------------
# Exclusions and metrics


def exclusion_reason(outcome: ReplayOutcome, block_time: int = 2,
                     min_lead: int | None = None) -> str | None:
    lead = block_time if min_lead is None else min_lead
    if outcome.zero_debt_artifact:
        return "zero_debt_artifact"
    base = outcome.baseline
    if base is None or not base.liquidated:
        return None
    if all(ev.classification == "dust" for ev in base.liquidations):
        return "dust_only"
    if base.first_liquidation - outcome.t_rec < lead:
        return "too_fast"
    return None


def apply_exclusions(outcomes: Sequence[ReplayOutcome], block_time: int = 2,
                     min_lead: int | None = None) -> list[ReplayOutcome]:
    """Mark excluded outcomes in place (idempotent) and return the kept ones."""
    kept = []
    for o in outcomes:
        reason = o.excluded or exclusion_reason(o, block_time, min_lead)
        if reason:
            o.excluded = reason
            o.baseline_liquidated = o.intervention_liquidated = None
        else:
            kept.append(o)
    return kept


@dataclass
class CohortMetrics:
    n_profiles: int = 0
    n_evaluated: int = 0
    n_excluded: dict[str, int] = field(default_factory=dict)
    n_baseline_liquidated: int = 0
    n_saved: int = 0
    n_worsened: int = 0
    salvage_rate: float | None = None
    worsening_rate: float = 0.0
    dust_avoided: int = 0
    consensus_agreement: float = 1.0
    skipped_futures: int = 0
    n_errors: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def cohort_metrics(outcomes: Sequence[ReplayOutcome], n_errors: int = 0) -> CohortMetrics:
    evaluated = [o for o in outcomes if o.excluded is None]
    excl = Counter(o.excluded for o in outcomes if o.excluded)
    base_liq = [o for o in evaluated if o.baseline_liquidated]
    saved = [o for o in base_liq if not o.intervention_liquidated]
    worse = [o for o in evaluated if o.intervention_liquidated and not o.baseline_liquidated]
    halves = [h for o in outcomes for h in (o.baseline, o.intervention) if h is not None]
    return CohortMetrics(
        n_profiles=len(outcomes), n_evaluated=len(evaluated),
        n_excluded={r: excl.get(r, 0) for r in EXCLUSION_REASONS},
        n_baseline_liquidated=len(base_liq), n_saved=len(saved), n_worsened=len(worse),
        salvage_rate=len(saved) / len(base_liq) if base_liq else None,
        worsening_rate=len(worse) / len(evaluated) if evaluated else 0.0,
        dust_avoided=excl.get("dust_only", 0),
        consensus_agreement=float(np.mean([h.agreement for h in halves])) if halves else 1.0,
        skipped_futures=sum(o.skipped_futures for o in evaluated),
        n_errors=n_errors)


# --------------------------------------------------------------------------
# Cohort evaluation


@dataclass(frozen=True)
class ReplayProfile:
    user_id: str
    t_rec: int


@dataclass
class CohortContext:
    log: EventLog
    oracle: PriceOracle
    configs: Mapping[str, ReserveConfig]
    wallets: Mapping[str, Mapping[str, Decimal]]
    market: MarketHistory | None = None

    def __post_init__(self):
        if self.market is None:
            self.market = MarketHistory.from_records(self.log)


@dataclass
class CohortResult:
    metrics: CohortMetrics
    outcomes: list[ReplayOutcome]
    errors: list[dict]


def evaluate_profile(profile: ReplayProfile, ctx: CohortContext,
                     engines: Mapping[str, HazardEngine], cfg: ReplayConfig,
                     agent: AgentParams) -> ReplayOutcome:
    events = ctx.log.for_user(profile.user_id)
    wallet = ctx.wallets.get(profile.user_id, {})
    t_rec = profile.t_rec
    base = fork_and_replay(events, t_rec, ctx.oracle, ctx.configs, wallet, None, cfg)
    outcome = ReplayOutcome(profile.user_id, t_rec, base.liquidated, None,
                            base.classification, "none", None, baseline=base)
    outcome.zero_debt_artifact = zero_debt_artifact(events, t_rec, ctx.oracle, ctx.configs,
                                                    wallet, cfg)
    if apply_exclusions([outcome], cfg.block_time, cfg.min_lead) == []:
        return outcome
    state = build_profile(events, t_rec, ctx.oracle, ctx.configs, wallet, market=ctx.market,
                          history_depth=agent.history_depth, utilization=cfg.utilization)
    assessment = assess_risk(state, engines, agent.trend)
    rec = recommend(state, assessment, engines, agent)
    rec = validate_feasibility(rec, state.account, cfg.dust_threshold)
    if rec.action_kind == "none":
        inter = base
    else:
        inter = fork_and_replay(events, t_rec, ctx.oracle, ctx.configs, wallet, rec, cfg)
    outcome.action = rec
    outcome.intervention = inter
    outcome.intervention_liquidated = inter.liquidated
    outcome.intervention_classification = inter.classification
    return outcome


def evaluate_cohort(profiles: Sequence[ReplayProfile], ctx: CohortContext,
                    engines: Mapping[str, HazardEngine], cfg: ReplayConfig = ReplayConfig(),
                    agent: AgentParams = AgentParams(), workers: int = 1) -> CohortResult:
    """Replay every profile; per-profile failures are collected, not raised."""
    ordered = sorted(set(profiles), key=lambda p: (p.user_id, p.t_rec))

    def run(p):
        try:
            return evaluate_profile(p, ctx, engines, cfg, agent), None
        except Exception as exc:  # noqa: BLE001 - reported per profile
            logger.warning("profile %s@%d failed: %s", p.user_id, p.t_rec, exc)
            return None, {"user_id": p.user_id, "t_rec": p.t_rec,
                          "error": type(exc).__name__, "detail": str(exc)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, ordered))
    else:
        results = [run(p) for p in ordered]
    outcomes = [o for o, _ in results if o is not None]
    errors = [e for _, e in results if e is not None]
    return CohortResult(cohort_metrics(outcomes, len(errors)), outcomes, errors)


# --------------------------------------------------------------------------
# Cohort sampling


def sample_checkpoints(records_by_task: Mapping, log: EventLog, per_pair: int,
                       window: tuple[float, float] = (0.4, 0.8), seed: int = 0,
                       ) -> list[ReplayProfile]:
    """Stratified recommendation checkpoints inside a percentile window of the log.

    ``records_by_task`` maps an ``EventPairTask`` to its survival records.
    Pairs ending in a liquidation keep their ``per_pair`` shortest observed
    durations; other pairs are sampled uniformly. Only checkpoints with a
    future are kept.
    """
    times = np.array([r.timestamp for r in log], dtype=float)
    lo, hi = (float(np.quantile(times, q, method="lower")) for q in window)
    rng = np.random.default_rng(seed)
    last = {u: log.for_user(u)[-1].timestamp for u in log.users}
    chosen: set[tuple[str, int]] = set()
    for task in sorted(records_by_task, key=lambda t: t.name):
        pool = [r for r in records_by_task[task]
                if lo <= r.index_time <= hi and last[r.user_id] > r.index_time]
        pool.sort(key=lambda r: (r.user_id, r.index_time))
        if task.outcome_event == "liquidation":
            observed = sorted((r for r in pool if r.event), key=lambda r: (r.duration, r.key))
            picked = observed[:per_pair]
        elif len(pool) > per_pair:
            idx = rng.choice(len(pool), size=per_pair, replace=False)
            picked = [pool[i] for i in sorted(idx)]
        else:
            picked = pool
        chosen.update(r.key for r in picked)
    return [ReplayProfile(u, t) for u, t in sorted(chosen)]


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation (average ranks for ties)."""
    def ranks(x):
        x = np.asarray(x, dtype=float)
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=float)
        for v in np.unique(x):
            m = x == v
            r[m] = r[m].mean()
        return r
    ra, rb = ranks(a), ranks(b)
    if ra.std() == 0 or rb.std() == 0:
        return math.nan
    return float(np.corrcoef(ra, rb)[0, 1])
