"""Verification scores for gridded ensemble forecasts.

Every spatial score takes arrays whose last two axes are (lat, lon) and
returns one value per remaining leading index (e.g. per channel and lead).
Ensemble arrays carry members on axis 0. Latitude weights come from
:func:`ensbench.grid.latitude_weights`.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    pass


def _check_same(a, b, what="arrays"):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def weighted_mean(values, weights):
    """Latitude-weighted mean over the trailing (lat, lon) axes."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.ndim < 2 or w.shape != (v.shape[-2],):
        raise MetricError(f"weights of shape {w.shape} do not match field shape {v.shape}")
    return (v * w[:, None]).mean(axis=(-2, -1))


def rmse(forecast, truth, weights):
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    _check_same(f, t, "forecast and truth")
    return np.sqrt(weighted_mean((f - t) ** 2, weights))


def acc(forecast, truth, clim_mean, weights):
    """Latitude-weighted anomaly correlation against a climatological mean."""
    f = np.asarray(forecast, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    _check_same(f, t, "forecast and truth")
    m = np.broadcast_to(np.asarray(clim_mean, dtype=np.float64), f.shape)
    fa, ta = f - m, t - m
    num = weighted_mean(fa * ta, weights)
    vf = weighted_mean(fa * fa, weights)
    vt = weighted_mean(ta * ta, weights)
    if np.any(vf <= 0) or np.any(vt <= 0):
        raise UndefinedMetricError("ACC undefined: zero anomaly variance in forecast or truth")
    return np.clip(num / np.sqrt(vf * vt), -1.0, 1.0)


def crps_ensemble(members, truth, estimator="empirical"):
    """Pointwise ensemble CRPS; members on axis 0.

    ``empirical`` scores the realised ensemble, ``fair`` is the estimator that is
    unbiased for the distribution the members were drawn from.
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape[1:] != y.shape:
        raise MetricError(f"members {x.shape} do not match truth {y.shape}")
    n = x.shape[0]
    if estimator not in ("empirical", "fair"):
        raise MetricError(f"unknown CRPS estimator {estimator!r}")
    if n < 1 or (estimator == "fair" and n < 2):
        raise MetricError(f"{estimator} CRPS needs more members, got {n}")
    if n == 1:
        return np.abs(x[0] - y)
    vals = kernels.crps_values(x.reshape(n, -1), y.ravel(), estimator == "fair")
    return vals.reshape(y.shape)


def crps(members, truth, weights, estimator="empirical"):
    return weighted_mean(crps_ensemble(members, truth, estimator), weights)


def spread(members, weights):
    """Square root of the weighted mean of the unbiased ensemble variance."""
    x = np.asarray(members, dtype=np.float64)
    if x.shape[0] < 2:
        raise MetricError("spread needs at least 2 members")
    return np.sqrt(weighted_mean(x.var(axis=0, ddof=1), weights))


def ssr(spread_value, rmse_value):
    s = np.asarray(spread_value, dtype=np.float64)
    r = np.asarray(rmse_value, dtype=np.float64)
    if np.any(r <= 0):
        raise UndefinedMetricError("SSR undefined: RMSE is zero")
    out = s / r
    return float(out) if out.ndim == 0 else out


def event_probability(members, threshold, direction="above"):
    x = np.asarray(members, dtype=np.float64)
    if direction == "above":
        return (x > threshold).mean(axis=0)
    if direction == "below":
        return (x < threshold).mean(axis=0)
    raise MetricError(f"direction must be 'above' or 'below', got {direction!r}")


def brier(members, truth, threshold, direction, weights):
    """Weighted Brier score of the threshold-exceedance event (strict comparison)."""
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape[1:] != y.shape:
        raise MetricError(f"members {x.shape} do not match truth {y.shape}")
    p = event_probability(x, threshold, direction)
    o = event_probability(y[None], threshold, direction)
    return weighted_mean((p - o) ** 2, weights)


def normalized_diff(metric_a, metric_b, kind="rmse_like"):
    """Relative skill of A against baseline B; negative is better for rmse/crps."""
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if kind in ("rmse_like", "crps_like"):
        if np.any(b <= 0):
            raise MetricError("normalized difference needs a positive baseline")
        out = (a - b) / b
    elif kind == "acc_like":
        if np.any(b == 1):
            raise MetricError("normalized ACC difference undefined for baseline ACC = 1")
        out = (a - b) / (1.0 - b)
    else:
        raise MetricError(f"unknown normalized-difference kind {kind!r}")
    return float(out) if out.ndim == 0 else out


class MetricAccumulator:
    """Running means of per-case scores keyed by (variable, lead, metric).

    Averaging over the case set goes through here so single-case and
    multi-case reports share one code path. ``merge`` is associative.
    """

    def __init__(self):
        self._sum: dict[tuple, float] = {}
        self._count: dict[tuple, int] = {}

    def add(self, variable, lead, metric, value):
        key = (str(variable), int(lead), str(metric))
        self._sum[key] = self._sum.get(key, 0.0) + float(value)
        self._count[key] = self._count.get(key, 0) + 1

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator()
        for src in (self, other):
            for k, v in src._sum.items():
                out._sum[k] = out._sum.get(k, 0.0) + v
                out._count[k] = out._count.get(k, 0) + src._count[k]
        return out

    def means(self) -> dict[tuple, float]:
        return {k: self._sum[k] / self._count[k] for k in sorted(self._sum)}

    def counts(self) -> dict[tuple, int]:
        return dict(self._count)
