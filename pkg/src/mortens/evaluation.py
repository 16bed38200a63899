"""Scoring of point and interval forecasts plus significance testing.

All scores work on log mortality rates. Point accuracy over a W-origin
window at horizon h averages squared (or absolute) errors over every age
and every origin that reaches h steps ahead, so the divisor is
n_ages * (W - h + 1); with 101 ages and a ten-year window that is the
101 * (11 - h) convention used throughout the result tables.

The interval score of a central (1 - theta) interval [L, U] for outcome y is

    (U - L) + (2/theta) (L - y) 1{y < L} + (2/theta) (y - U) 1{y > U}

so it always pays the width and adds a linear penalty only for strict
misses; its window mean uses the same divisor as the point scores.

Forecast-accuracy comparisons use the Diebold-Mariano statistic on squared
log-scale errors with a rectangular-kernel long-run variance truncated at
h - 1 lags, Student t reference with n - 1 degrees of freedom, and a
one-sided alternative that the first series is the more accurate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import stats

from .models.window import ForecastPanel
from .shapley import ShapReport

__all__ = [
    "AgeGroupMse",
    "DMResult",
    "EvalError",
    "age_group_label",
    "age_stratified_mse",
    "dm_test",
    "interval_score",
    "mean_interval_score",
    "point_scores",
    "selection_frequency",
]


class EvalError(RuntimeError):
    """Scoring input is incomplete or inconsistent."""


def _required_cells(shape: tuple[int, int, int], horizon: int) -> np.ndarray:
    """Mask of the cells a complete window must fill at this horizon."""
    A, H, W = shape
    if not 1 <= horizon <= H:
        raise ValueError(f"horizon {horizon} outside 1..{H}")
    mask = np.zeros(shape, dtype=bool)
    mask[:, horizon - 1, : W - horizon + 1] = True
    return mask


def _check_coverage(values: np.ndarray, mask: np.ndarray, what: str):
    missing = mask & ~np.isfinite(values)
    if missing.any():
        cells = [f"(age_idx={a}, h={h + 1}, origin_idx={k})"
                 for a, h, k in np.argwhere(missing)[:5]]
        more = int(missing.sum()) - len(cells)
        tail = f" and {more} more" if more > 0 else ""
        raise EvalError(f"{what} missing at {', '.join(cells)}{tail}")


def point_scores(panel: ForecastPanel, horizon: int) -> tuple[float, float]:
    """(MSE, MAE) of log-rate forecasts at one horizon over the window."""
    mask = _required_cells(panel.point.shape, horizon)
    log_point = panel.log_point
    _check_coverage(log_point, mask, "forecasts")
    _check_coverage(panel.truth_log, mask, "realized rates")
    err = log_point[mask] - panel.truth_log[mask]
    n = err.size
    return float(err @ err) / n, float(np.abs(err).sum()) / n


def interval_score(lower, upper, ln_y, theta: float = 0.2):
    """Pointwise score of [lower, upper] against outcome ln_y.

    Inputs broadcast; every interval must satisfy lower < upper. Outcomes
    exactly on an endpoint pay only the width.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie strictly between 0 and 1")
    L = np.asarray(lower, dtype=float)
    U = np.asarray(upper, dtype=float)
    y = np.asarray(ln_y, dtype=float)
    if np.any(L >= U):
        raise ValueError("every interval needs lower < upper")
    score = (U - L) \
        + (2.0 / theta) * np.where(y < L, L - y, 0.0) \
        + (2.0 / theta) * np.where(y > U, y - U, 0.0)
    return score if score.ndim else float(score)


def mean_interval_score(log_lower: np.ndarray, log_upper: np.ndarray,
                        truth_log: np.ndarray, horizon: int,
                        theta: float = 0.2) -> float:
    """Window mean of the interval score at one horizon.

    The cubes are (ages, horizons, origins) on the log scale, NaN outside
    the window; the mean uses the n_ages * (W - h + 1) divisor.
    """
    log_lower = np.asarray(log_lower, dtype=float)
    if log_lower.ndim != 3:
        raise ValueError("expected (ages, horizons, origins) cubes")
    mask = _required_cells(log_lower.shape, horizon)
    _check_coverage(log_lower, mask, "lower endpoints")
    _check_coverage(log_upper, mask, "upper endpoints")
    _check_coverage(truth_log, mask, "realized rates")
    s = interval_score(log_lower[mask], log_upper[mask], truth_log[mask],
                       theta)
    return float(s.sum()) / s.size


@dataclass(frozen=True)
class DMResult:
    """Diebold-Mariano outcome; statistic and p-value are None when the
    loss differential has zero variance."""

    statistic: float | None
    p_value: float | None
    n: int
    degenerate: bool = False
    lrv_fallback: bool = False


def dm_test(errors_a: np.ndarray, errors_b: np.ndarray, horizon: int) -> DMResult:
    """Test whether forecast errors_a are more accurate than errors_b.

    The loss differential d_t = e_a^2 - e_b^2 gets a long-run variance
    from the rectangular kernel with horizon - 1 lags; a negative kernel
    sum falls back to the lag-0 variance and is flagged. The p-value is
    one-sided against "a is more accurate" (small statistic, low p).
    """
    a = np.asarray(errors_a, dtype=float).ravel()
    b = np.asarray(errors_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("error series differ in length")
    n = a.size
    if n < 5:
        raise ValueError(f"need at least 5 paired errors, got {n}")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    d = a**2 - b**2
    dbar = d.mean()
    u = d - dbar
    gamma0 = float(u @ u) / n
    if gamma0 == 0.0:
        return DMResult(statistic=None, p_value=None, n=n, degenerate=True)
    lrv = gamma0
    for j in range(1, min(horizon, n)):
        lrv += 2.0 * float(u[j:] @ u[:-j]) / n
    fallback = lrv <= 0.0
    if fallback:
        lrv = gamma0
    stat = dbar / np.sqrt(lrv / n)
    p = float(stats.t.cdf(stat, df=n - 1))
    return DMResult(statistic=float(stat), p_value=p, n=n,
                    lrv_fallback=bool(fallback))


def age_group_label(age: int) -> str:
    """The reporting band an individual age belongs to."""
    if age <= 0:
        return "0"
    if age <= 4:
        return "1-4"
    if age >= 100:
        return "100"
    lo = 5 * (age // 5)
    return f"{lo}-{lo + 4}"


@dataclass(frozen=True)
class AgeGroupMse:
    """Pooled MSE by age band and method, raw and standardized.

    Standardization is within each band: the worst method maps to 1, the
    best to 0, linearly in between; a band where all methods tie maps to
    all zeros.
    """

    groups: tuple[str, ...]
    methods: tuple[str, ...]
    raw: np.ndarray
    standardized: np.ndarray


def age_stratified_mse(panels: Mapping[str, ForecastPanel]) -> AgeGroupMse:
    """Pool every window cell into age bands and standardize across methods."""
    if len(panels) < 2:
        raise EvalError("standardization needs at least two methods")
    methods = tuple(panels)
    ref = next(iter(panels.values()))
    for m, p in panels.items():
        if not np.array_equal(p.ages, ref.ages):
            raise EvalError(f"{m} scores a different age grid")
    labels = [age_group_label(int(a)) for a in ref.ages]
    groups = list(dict.fromkeys(labels))
    rows = {g: np.flatnonzero([l == g for l in labels]) for g in groups}
    raw = np.empty((len(groups), len(methods)))
    for j, m in enumerate(methods):
        p = panels[m]
        se = (p.log_point - p.truth_log) ** 2
        for i, g in enumerate(groups):
            vals = se[rows[g]]
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                raise EvalError(f"no scored cells in age group {g}")
            raw[i, j] = vals.mean()
    lo = raw.min(axis=1, keepdims=True)
    span = raw.max(axis=1, keepdims=True) - lo
    std = np.zeros_like(raw)
    nz = span[:, 0] > 0
    std[nz] = (raw[nz] - lo[nz]) / span[nz]
    return AgeGroupMse(groups=tuple(groups), methods=methods, raw=raw,
                       standardized=std)


def selection_frequency(report: ShapReport, alpha: float) -> dict[str, int]:
    """How many ages keep each model after truncating at alpha."""
    if alpha < 0:
        raise ValueError("truncation threshold must be nonnegative")
    keep = report.phi_mean > alpha
    return {m: int(keep[i].sum()) for i, m in enumerate(report.players)}
