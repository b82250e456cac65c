"""Cox hazard models, a median-shifted Breslow baseline, and return periods.

The return period of an event over a horizon ``dt`` is ``dt / max(P, eps)``
with ``P = 1 - exp(-H0(dt) * exp(eta - S))``. ``S`` is the median training
log-hazard; subtracting it keeps the relative risks near 1 so that extreme
scores neither overflow nor underflow.
"""

from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .survival import SurvivalRecord, records_to_arrays

DEFAULT_EPSILON = 1e-12
DEFAULT_HORIZON_DAYS = 7.0
DEFAULT_RIDGE = 1e-4

# exp() arguments are clipped to this range
_EXP_LO, _EXP_HI = -740.0, 709.0
# relative risks exp(eta - S) are clipped to exp(+-300): risk-set sums and their
# reciprocals then stay finite for any realistic number of records
RISK_CLIP = 300.0


class HazardError(Exception):
    pass


class FitError(HazardError):
    def __init__(self, message: str, feature_index: int | None = None):
        super().__init__(message)
        self.feature_index = feature_index


class ScoreLookupError(HazardError, KeyError):
    pass


@dataclass(frozen=True, eq=False)
class HazardModel:
    """A log-hazard scorer: linear in the features, or a table of external scores."""

    kind: str
    coefficients: np.ndarray | None = None
    scores: Mapping[tuple[str, int], float] | None = None
    iterations: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind == "linear_cox":
            if self.coefficients is None:
                raise ValueError("linear_cox needs coefficients")
            object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        elif self.kind == "external_scores":
            if self.scores is None:
                raise ValueError("external_scores needs a score table")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")

    def log_hazard(self, x, keys: Sequence[tuple[str, int]] | None = None) -> np.ndarray:
        if self.kind == "linear_cox":
            x = np.atleast_2d(np.asarray(x, dtype=float))
            if x.shape[1] != self.coefficients.shape[0]:
                raise ValueError(f"expected {self.coefficients.shape[0]} features, got {x.shape[1]}")
            return x @ self.coefficients
        if keys is None:
            raise ScoreLookupError("external scores need (user_id, index_time) keys")
        try:
            return np.array([self.scores[(u, int(t))] for u, t in keys], dtype=float)
        except KeyError as exc:
            raise ScoreLookupError(f"no external score for {exc.args[0]}") from None

    def to_json(self) -> dict:
        if self.kind == "linear_cox":
            return {"kind": self.kind, "coefficients": [float(b) for b in self.coefficients]}
        return {"kind": self.kind}


def load_external_scores(path: str | Path) -> HazardModel:
    """CSV with columns ``user_id,index_time,eta``."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[(row["user_id"], int(row["index_time"]))] = float(row["eta"])
    return HazardModel("external_scores", scores=table)


# --------------------------------------------------------------------------
# Partial likelihood


def _event_groups(durations: np.ndarray, events: np.ndarray):
    """Sort ascending and return (order, unique event times, deaths, first index per time)."""
    order = np.argsort(durations, kind="stable")
    d = durations[order]
    e = events[order]
    event_times = np.unique(d[e == 1])
    deaths = np.bincount(np.searchsorted(event_times, d[e == 1]),
                         minlength=len(event_times)).astype(float)
    # first sorted index with duration >= t, i.e. start of the risk set tail
    first = np.searchsorted(d, event_times, side="left")
    return order, d, e, event_times, deaths, first


def cox_partial_likelihood(beta, x, durations, events, ridge: float = 0.0,
                           derivatives: bool = True):
    """Breslow log partial likelihood minus ``ridge * |beta|^2 / 2``.

    Returns ``(value, gradient, hessian)`` (the last two ``None`` unless
    ``derivatives``).
    """
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=int)
    order, d, e, times, deaths, first = _event_groups(durations, events)
    xs = x[order]
    eta = xs @ beta
    top = eta.max() if eta.size else 0.0
    w = np.exp(eta - top)
    s0 = np.cumsum(w[::-1])[::-1]
    s0_k = s0[first]
    log_s0 = np.log(s0_k) + top
    value = float(eta[e == 1].sum() - np.dot(deaths, log_s0) - 0.5 * ridge * beta @ beta)
    if not derivatives:
        return value, None, None
    s1 = np.cumsum((w[:, None] * xs)[::-1], axis=0)[::-1]
    mean_k = s1[first] / s0_k[:, None]
    # c_j = sum over event times t_k <= d_j of deaths_k / S0_k
    inc = deaths / s0_k
    c = np.concatenate([[0.0], np.cumsum(inc)])[np.searchsorted(times, d, side="right")]
    grad = xs[e == 1].sum(axis=0) - deaths @ mean_k - ridge * beta
    wc = w * c
    info = (xs * wc[:, None]).T @ xs - (mean_k * deaths[:, None]).T @ mean_k
    hess = -info - ridge * np.eye(len(beta))
    return value, grad, hess


def fit_cox_arrays(x, durations, events, ridge: float = DEFAULT_RIDGE,
                   max_iter: int = 100, tol: float = 1e-8) -> HazardModel:
    x = np.asarray(x, dtype=float)
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=int)
    if x.ndim != 2 or x.shape[0] < 2:
        raise FitError("need at least 2 records")
    if not events.any():
        raise FitError("no events (all records censored)")
    bad_cols = np.flatnonzero(~np.isfinite(x).all(axis=0))
    if bad_cols.size:
        raise FitError(f"non-finite values in feature {bad_cols[0]}", int(bad_cols[0]))
    if np.any(durations <= 0) or not np.isfinite(durations).all():
        raise FitError("durations must be positive and finite")

    p = x.shape[1]
    beta = np.zeros(p)
    value, grad, hess = cox_partial_likelihood(beta, x, durations, events, ridge)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        scale = 1.0
        while True:
            cand = beta + scale * step
            new_value, new_grad, new_hess = cox_partial_likelihood(
                cand, x, durations, events, ridge)
            if np.isfinite(new_value) and new_value >= value - 1e-12 * abs(value):
                break
            scale *= 0.5
            if scale < 1e-10:
                contrib = np.max(np.abs(x * cand), axis=0)
                raise FitError("partial likelihood is not finite",
                               int(np.argmax(contrib)))
        beta, value, grad, hess = cand, new_value, new_grad, new_hess
    if not np.isfinite(beta).all():
        raise FitError("coefficients diverged", int(np.argmax(~np.isfinite(beta))))
    return HazardModel("linear_cox", coefficients=beta, iterations=it)


def fit_cox(records: Sequence[SurvivalRecord], ridge: float = DEFAULT_RIDGE,
            max_iter: int = 100, tol: float = 1e-8) -> HazardModel:
    """Ridge-penalized linear Cox fit by damped Newton ascent."""
    if len(records) < 2:
        raise FitError("need at least 2 records")
    x, durations, events, _ = records_to_arrays(records)
    return fit_cox_arrays(x, durations, events, ridge, max_iter, tol)


# --------------------------------------------------------------------------
# Baseline and return period


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    return float(v[(len(v) - 1) // 2])


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    shift: float
    grid: np.ndarray
    cumhaz: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "cumhaz", np.asarray(self.cumhaz, dtype=float))
        if self.grid.shape != self.cumhaz.shape:
            raise ValueError("grid and cumhaz must align")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(np.diff(self.cumhaz) < 0) or np.any(self.cumhaz < 0):
            raise ValueError("cumulative hazard must be non-negative and non-decreasing")

    def cumulative_hazard(self, t: float) -> float:
        i = np.searchsorted(self.grid, t, side="right") - 1
        return float(self.cumhaz[i]) if i >= 0 else 0.0

    def to_json(self) -> dict:
        return {"shift": self.shift, "epsilon": self.epsilon,
                "grid": [float(v) for v in self.grid],
                "cumhaz": [float(v) for v in self.cumhaz]}

    @classmethod
    def from_json(cls, data: Mapping) -> BaselineHazard:
        return cls(float(data["shift"]), data["grid"], data["cumhaz"],
                   float(data.get("epsilon", DEFAULT_EPSILON)))


def relative_risk(eta, shift: float) -> np.ndarray:
    return np.exp(np.clip(np.asarray(eta, dtype=float) - shift, -RISK_CLIP, RISK_CLIP))


def baseline_from_scores(eta, durations, events,
                         epsilon: float = DEFAULT_EPSILON) -> BaselineHazard:
    """Breslow cumulative baseline hazard from precomputed log-hazards."""
    eta = np.asarray(eta, dtype=float)
    durations = np.asarray(durations, dtype=float)
    events = np.asarray(events, dtype=int)
    if eta.size == 0:
        raise HazardError("no records")
    if not np.isfinite(eta).all():
        raise HazardError("non-finite log-hazard")
    shift = lower_median(eta)
    r = relative_risk(eta, shift)
    order = np.argsort(durations, kind="stable")
    d, e, r = durations[order], events[order], r[order]
    times = np.unique(d[e == 1])
    if times.size == 0:
        return BaselineHazard(shift, [], [], epsilon)
    deaths = np.bincount(np.searchsorted(times, d[e == 1]), minlength=times.size).astype(float)
    risk = np.cumsum(r[::-1])[::-1][np.searchsorted(d, times, side="left")]
    if np.any(risk <= 0):
        raise HazardError("empty risk set at an event time")
    return BaselineHazard(shift, times, np.cumsum(deaths / risk), epsilon)


def estimate_baseline(model: HazardModel, records: Sequence[SurvivalRecord],
                      epsilon: float = DEFAULT_EPSILON) -> BaselineHazard:
    """Shifted Breslow baseline: S = lower median of eta, risk sets by reverse cumsum."""
    if not records:
        raise HazardError("no records")
    x, durations, events, keys = records_to_arrays(records)
    return baseline_from_scores(model.log_hazard(x, keys), durations, events, epsilon)


def event_probability(cumhaz: float, eta, shift: float) -> np.ndarray:
    """``1 - exp(-H * exp(eta - S))`` computed without overflow."""
    eta = np.asarray(eta, dtype=float)
    if not np.isfinite(eta).all():
        raise HazardError("non-finite log-hazard")
    if cumhaz <= 0:
        return np.zeros_like(eta)
    z = np.exp(np.clip(math.log(cumhaz) + eta - shift, _EXP_LO, _EXP_HI))
    return -np.expm1(-z)


def return_period_from_eta(baseline: BaselineHazard, eta, horizon: float = DEFAULT_HORIZON_DAYS):
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    p = event_probability(baseline.cumulative_hazard(horizon), eta, baseline.shift)
    return horizon / np.maximum(p, baseline.epsilon)


def return_period(model: HazardModel, baseline: BaselineHazard, x_new,
                  horizon: float = DEFAULT_HORIZON_DAYS,
                  key: tuple[str, int] | None = None) -> float:
    """Return period in days of one feature vector over ``horizon`` days."""
    x = np.asarray(x_new, dtype=float)
    if not np.isfinite(x).all():
        raise HazardError("non-finite feature value")
    eta = model.log_hazard(x.reshape(1, -1), None if key is None else [key])
    return float(return_period_from_eta(baseline, eta, horizon)[0])


@dataclass(frozen=True, eq=False)
class HazardEngine:
    """A fitted model, its baseline and a horizon: features in, return periods out."""

    model: HazardModel
    baseline: BaselineHazard
    horizon: float = DEFAULT_HORIZON_DAYS

    @classmethod
    def fit(cls, records: Sequence[SurvivalRecord], ridge: float = DEFAULT_RIDGE,
            horizon: float = DEFAULT_HORIZON_DAYS,
            epsilon: float = DEFAULT_EPSILON) -> HazardEngine:
        model = fit_cox(records, ridge)
        return cls(model, estimate_baseline(model, records, epsilon), horizon)

    def return_periods(self, x, keys: Sequence[tuple[str, int]] | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.isfinite(x).all():
            raise HazardError("non-finite feature value")
        return return_period_from_eta(self.baseline, self.model.log_hazard(x, keys),
                                      self.horizon)

    def return_period(self, x, key: tuple[str, int] | None = None) -> float:
        return return_period(self.model, self.baseline, x, self.horizon, key)

    def to_json(self) -> dict:
        return {"model": self.model.to_json(), "baseline": self.baseline.to_json(),
                "horizon_days": self.horizon}

    @classmethod
    def from_json(cls, data: Mapping, scores: HazardModel | None = None) -> HazardEngine:
        m = data["model"]
        model = scores if m["kind"] == "external_scores" else HazardModel(
            "linear_cox", coefficients=m["coefficients"])
        if model is None:
            raise HazardError("external-score engine needs its score table")
        return cls(model, BaselineHazard.from_json(data["baseline"]),
                   float(data.get("horizon_days", DEFAULT_HORIZON_DAYS)))


def save_engines(engines: Mapping[str, HazardEngine], path: str | Path,
                 extra: Mapping | None = None) -> None:
    data = dict(extra or {})
    data["engines"] = {e: eng.to_json() for e, eng in engines.items()}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
