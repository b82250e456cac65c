"""Volatility-adjusted, dimensionless trend score of a return-period series."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class TrendParams:
    accel_weight: float = 0.8
    vol_penalty: float = 0.6
    momentum: float = 0.3

    def __post_init__(self):
        if not np.isfinite([self.accel_weight, self.vol_penalty, self.momentum]).all():
            raise ValueError("trend parameters must be finite")


@dataclass(frozen=True)
class TrendScore:
    value: float
    z_slope: float = 0.0
    z_accel: float = 0.0
    z_vol: float = 0.0
    rel: float = 0.0
    flags: frozenset[str] = field(default_factory=frozenset)

    @property
    def degenerate(self) -> bool:
        return "zero_variance" in self.flags or "too_short" in self.flags


def ols_fit(times: Sequence[float], values: Sequence[float]) -> tuple[float, float]:
    """Least-squares ``(slope, intercept)``."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.size < 2 or t.size != y.size:
        raise DegenerateInputError("need at least two (t, y) pairs")
    tc = t - t.mean()
    sxx = float(tc @ tc)
    if sxx == 0.0:
        raise DegenerateInputError("times have zero variance")
    slope = float(tc @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * t.mean())


def _segment_z(t: np.ndarray, y: np.ndarray, sigma: float, flags: set, name: str) -> float:
    span = t[-1] - t[0] if t.size else 0.0
    if t.size < 2 or span == 0.0:
        flags.add(f"{name}_short")
        return 0.0
    try:
        slope, _ = ols_fit(t, y)
    except DegenerateInputError:
        flags.add(f"{name}_short")
        return 0.0
    return slope * span / sigma


def trend_score(times: Sequence[float], values: Sequence[float],
                params: TrendParams = TrendParams()) -> TrendScore:
    """Composite score ``(Z_slope + w*Z_accel - l*Z_vol) * (1 + g*Rel)``.

    Standard deviations are population (ddof=0). Zero variance of the values
    gives a zero score flagged ``zero_variance``.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    n = t.size
    if n < 2 or y.size != n:
        raise DegenerateInputError("trend score needs at least two points")
    sigma = float(y.std())
    if sigma == 0.0 or not np.isfinite(sigma):
        return TrendScore(0.0, flags=frozenset({"zero_variance"}))
    flags: set[str] = set()
    slope, intercept = ols_fit(t, y)
    z_slope = slope * (t[-1] - t[0]) / sigma

    k = max(2, n // 2)
    z_past = _segment_z(t[: n - k], y[: n - k], sigma, flags, "past")
    z_recent = _segment_z(t[n - k:], y[n - k:], sigma, flags, "recent")
    z_accel = z_recent - z_past

    resid = y - (slope * t + intercept)
    z_vol = float(resid.std()) / sigma

    base = z_slope + params.accel_weight * z_accel - params.vol_penalty * z_vol
    mean = float(y.mean())
    if mean == 0.0:
        flags.add("zero_mean")
        rel = 0.0
    else:
        rel = (y[-1] - mean) / abs(mean)
    return TrendScore(base * (1.0 + params.momentum * rel), z_slope, z_accel, z_vol, rel,
                      frozenset(flags))
