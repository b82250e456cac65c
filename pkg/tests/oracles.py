"""Independent, deliberately naive reference implementations for tests."""

from __future__ import annotations

import math

import numpy as np


def breslow_naive(eta, durations, events):
    """O(N^2) Breslow with the lower-median shift; returns (shift, times, cumhaz)."""
    eta = [float(v) for v in eta]
    srt = sorted(eta)
    shift = srt[(len(srt) - 1) // 2]
    r = [math.exp(min(300.0, max(-300.0, e - shift))) for e in eta]
    times = sorted({d for d, e in zip(durations, events) if e == 1})
    cum, out = 0.0, []
    for t in times:
        deaths = sum(1 for d, e in zip(durations, events) if e == 1 and d == t)
        risk = sum(ri for ri, d in zip(r, durations) if d >= t)
        cum += deaths / risk
        out.append(cum)
    return shift, times, out


def cox_loglik_naive(beta, x, durations, events, ridge=0.0):
    """Breslow partial log-likelihood minus ridge*|beta|^2/2, by direct sums."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    eta = x @ beta
    ll = 0.0
    for i in range(len(durations)):
        if events[i] != 1:
            continue
        at_risk = [j for j in range(len(durations)) if durations[j] >= durations[i]]
        m = max(eta[j] for j in at_risk)
        ll += eta[i] - (m + math.log(sum(math.exp(eta[j] - m) for j in at_risk)))
    return ll - 0.5 * ridge * float(beta @ beta)


def trend_naive(times, values, w=0.8, lam=0.6, g=0.3):
    """Trend score by explicit sums; no numpy."""
    n = len(values)
    mean = sum(values) / n
    sigma = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
    if sigma == 0:
        return 0.0

    def fit(ts, ys):
        mt, my = sum(ts) / len(ts), sum(ys) / len(ys)
        sxx = sum((t - mt) ** 2 for t in ts)
        b = sum((t - mt) * (y - my) for t, y in zip(ts, ys)) / sxx
        return b, my - b * mt

    b, a = fit(times, values)
    z_slope = b * (times[-1] - times[0]) / sigma
    k = max(2, n // 2)

    def seg(ts, ys):
        if len(ts) < 2 or ts[-1] == ts[0]:
            return 0.0
        return fit(ts, ys)[0] * (ts[-1] - ts[0]) / sigma

    z_acc = seg(times[n - k:], values[n - k:]) - seg(times[: n - k], values[: n - k])
    res = [y - (b * t + a) for t, y in zip(times, values)]
    rm = sum(res) / n
    z_vol = math.sqrt(sum((e - rm) ** 2 for e in res) / n) / sigma
    rel = 0.0 if mean == 0 else (values[-1] - mean) / abs(mean)
    return (z_slope + w * z_acc - lam * z_vol) * (1 + g * rel)


def health_factor_naive(collateral, debt, prices, lts):
    """collateral/debt: {asset: float amount}."""
    d = sum(v * prices[a] for a, v in debt.items())
    if d == 0:
        return math.inf
    return sum(v * prices[a] * lts[a] for a, v in collateral.items()) / d
