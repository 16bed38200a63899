"""Point and interval forecast combination.

Point ensembles average log rates: given simplex weights w the combined
forecast is exp(sum_i w_i ln m_i), so equal weights give the geometric
mean of the member rates and every combined value stays inside the member
range on the log scale. Weight vectors come from three places: uniform
(the simple model average), Shapley reports (optionally truncated), and
validation AIC.

Interval ensembles combine the member endpoints with one of five rules:

    sa    equal-weight mean of lower and upper endpoints
    it    interior trimming: drop the d largest lower endpoints and the d
          smallest upper endpoints, then average what remains
    aic   endpoint mean weighted by validation-AIC weights
    mse   endpoint mean weighted by exp(-MSE_i) / sum_j exp(-MSE_j)
    shap  endpoint mean weighted by truncated normalized Shapley values

The endpoint combinators are scale-agnostic: they apply their arithmetic
to whatever arrays they are given. The panel helpers feed them log-scale
endpoints, matching the evaluation conventions, and transform back.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .models.base import ForecastGrid
from .models.window import ForecastPanel
from .shapley import WeightVector

__all__ = [
    "EnsembleError",
    "IntervalEnsembleSpec",
    "PointEnsembleSpec",
    "aic_weights",
    "combine_interval",
    "combine_panel_intervals",
    "combine_panel_points",
    "combine_point",
    "gaussian_aic",
    "mse_weights",
    "sma_weights",
]

POINT_METHODS = ("shap", "shap_truncated", "sma", "aic")
INTERVAL_METHODS = ("sa", "it", "aic", "mse", "shap")


class EnsembleError(RuntimeError):
    """A forecast combination could not be carried out."""


@dataclass(frozen=True)
class PointEnsembleSpec:
    """Which point-combination rule to run, and its threshold if truncated."""

    method: str
    alpha: float | None = None

    def __post_init__(self):
        if self.method not in POINT_METHODS:
            raise ValueError(f"unknown point method {self.method!r}")
        if (self.alpha is not None) != (self.method == "shap_truncated"):
            raise ValueError(
                "alpha must be given exactly when method is shap_truncated")


@dataclass(frozen=True)
class IntervalEnsembleSpec:
    """Which interval-combination rule to run and its tuning constants."""

    method: str
    trim_d: int = 3
    theta: float = 0.2
    alpha: float | None = None

    def __post_init__(self):
        if self.method not in INTERVAL_METHODS:
            raise ValueError(f"unknown interval method {self.method!r}")
        if self.trim_d < 0:
            raise ValueError("trim depth must be nonnegative")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie strictly between 0 and 1")


# ---------------------------------------------------------------------------
# weight constructors
# ---------------------------------------------------------------------------

def sma_weights(models: Sequence[str]) -> WeightVector:
    """Equal weights 1/N over every model."""
    models = tuple(models)
    if not models:
        raise ValueError("no models to weight")
    w = 1.0 / len(models)
    return WeightVector(weights={m: w for m in models}, selected=models,
                        threshold=0.0)


def gaussian_aic(residuals: np.ndarray, k: int) -> float:
    """n ln(RSS/n) + 2k for a Gaussian likelihood with known residuals."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty residual vector")
    rss = float(r @ r)
    with np.errstate(divide="ignore"):
        return float(r.size * np.log(rss / r.size) + 2 * k)


def aic_weights(residuals: Mapping[str, np.ndarray],
                k: Mapping[str, int]) -> WeightVector:
    """Weights proportional to |AIC| over the models with negative AIC.

    The AIC is computed from each model's pooled validation residuals on
    the log scale. Models with nonnegative AIC get weight zero; if no
    model scores negative there is nothing to normalize and the caller
    should fall back to the simple average.
    """
    if not residuals:
        raise ValueError("no residuals given")
    aics = {m: gaussian_aic(r, int(k[m])) for m, r in residuals.items()}
    neg = {m: a for m, a in aics.items() if a < 0}
    if not neg:
        raise EnsembleError(
            "no model has negative validation AIC; fall back to the "
            "simple model average")
    exact = [m for m, a in neg.items() if np.isinf(a)]
    if exact:
        # an interpolating model has RSS 0 and AIC -inf; split evenly
        w = {m: (1.0 / len(exact) if m in exact else 0.0) for m in aics}
    else:
        total = sum(abs(a) for a in neg.values())
        w = {m: (abs(aics[m]) / total if m in neg else 0.0) for m in aics}
    return WeightVector(weights=w, selected=tuple(neg), threshold=0.0)


def mse_weights(mse: Mapping[str, float]) -> WeightVector:
    """Softmax of negated validation MSE: w_i = exp(-MSE_i)/sum exp(-MSE_j)."""
    if not mse:
        raise ValueError("no MSE values given")
    models = tuple(mse)
    vals = np.array([float(mse[m]) for m in models])
    if not np.all(np.isfinite(vals)):
        raise ValueError("MSE values must be finite")
    e = np.exp(-(vals - vals.min()))
    w = e / e.sum()
    return WeightVector(weights={m: float(w[i]) for i, m in enumerate(models)},
                        selected=models, threshold=0.0)


# ---------------------------------------------------------------------------
# point combination
# ---------------------------------------------------------------------------

def _weight_matrix(weights, models: tuple[str, ...],
                   ages: np.ndarray) -> np.ndarray:
    """(N, A) weight matrix from a WeightVector or an age-keyed mapping."""
    if isinstance(weights, WeightVector):
        _check_model_set(set(weights.weights), set(models))
        col = weights.as_array(models)
        return np.repeat(col[:, None], ages.size, axis=1)
    W = np.empty((len(models), ages.size))
    for j, age in enumerate(ages):
        try:
            wv = weights[int(age)]
        except KeyError:
            raise EnsembleError(f"no weight vector for age {int(age)}") \
                from None
        _check_model_set(set(wv.weights), set(models))
        W[:, j] = wv.as_array(models)
    return W


def _check_model_set(have: set, need: set):
    if have != need:
        missing = sorted(need - have)
        extra = sorted(have - need)
        raise EnsembleError(
            f"weights and forecasts disagree on the model set "
            f"(missing {missing}, extra {extra})")


def combine_point(forecasts: Mapping[str, ForecastGrid],
                  weights, name: str = "ensemble") -> ForecastGrid:
    """Log-scale weighted combination of one origin's point forecasts.

    ``weights`` is a single WeightVector applied at every age, or a
    mapping age -> WeightVector for age-varying weights. All grids must
    cover the same ages and horizons; a model missing a cell is reported
    by name.
    """
    if not forecasts:
        raise ValueError("no forecasts to combine")
    models = tuple(forecasts)
    ref = forecasts[models[0]]
    H = max(g.horizons.size for g in forecasts.values())
    for m, g in forecasts.items():
        if not np.array_equal(g.ages, ref.ages):
            raise EnsembleError(f"{m} forecasts a different age grid")
        if g.origin_year != ref.origin_year:
            raise EnsembleError(f"{m} forecasts from origin {g.origin_year}, "
                                f"expected {ref.origin_year}")
        if g.horizons.size < H:
            age = int(g.ages[0])
            raise EnsembleError(
                f"{m} has no forecast at age {age}, "
                f"horizon {g.horizons.size + 1}")
    pts = np.stack([forecasts[m].point for m in models])
    bad = ~np.isfinite(pts)
    if bad.any():
        i, a, h = np.argwhere(bad)[0]
        raise EnsembleError(
            f"{models[i]} has no forecast at age {int(ref.ages[a])}, "
            f"horizon {int(ref.horizons[h])}")
    W = _weight_matrix(weights, models, ref.ages)
    # the product-of-powers form of exp(sum w ln m); exact for one-hot weights
    point = np.prod(pts ** W[:, :, None], axis=0)
    return ForecastGrid(
        model=name,
        origin_year=ref.origin_year,
        ages=ref.ages.copy(),
        horizons=ref.horizons.copy(),
        point=point,
        gender=ref.gender,
        population_id=ref.population_id,
    )


def _check_panel_alignment(panels: Mapping[str, ForecastPanel]) -> ForecastPanel:
    ref = next(iter(panels.values()))
    for m, p in panels.items():
        if not np.array_equal(p.ages, ref.ages) or \
                not np.array_equal(p.origins, ref.origins):
            raise EnsembleError(f"{m} covers different ages or origins")
    return ref


def combine_panel_points(panels: Mapping[str, ForecastPanel],
                         weights, name: str = "ensemble") -> ForecastPanel:
    """Log-scale weighted combination across a whole expanding window."""
    if not panels:
        raise ValueError("no panels to combine")
    models = tuple(panels)
    ref = _check_panel_alignment(panels)
    pts = np.stack([panels[m].point for m in models])
    W = _weight_matrix(weights, models, ref.ages)
    with np.errstate(invalid="ignore"):
        point = np.prod(pts ** W[:, :, None, None], axis=0)
    return ForecastPanel(
        model=name,
        gender=ref.gender,
        population_id=ref.population_id,
        ages=ref.ages.copy(),
        horizons=ref.horizons.copy(),
        origins=ref.origins.copy(),
        point=point,
        truth_log=ref.truth_log.copy(),
    )


# ---------------------------------------------------------------------------
# interval combination
# ---------------------------------------------------------------------------

def combine_interval(lower: np.ndarray, upper: np.ndarray,
                     spec: IntervalEnsembleSpec,
                     weights: np.ndarray | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Combine stacked member endpoints along axis 0.

    ``lower`` and ``upper`` are (N, ...) arrays on whichever scale the
    caller evaluates intervals; the rule named in ``spec`` is applied
    cell-wise. Weighted rules (aic, mse, shap) need ``weights``, either
    one value per model or an array broadcastable against the members,
    and raise if any combined cell ends up with lower >= upper.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or lower.ndim < 1:
        raise ValueError("lower and upper must be equal-shaped (N, ...) arrays")
    N = lower.shape[0]
    if spec.method == "sa":
        return lower.mean(axis=0), upper.mean(axis=0)
    if spec.method == "it":
        d = spec.trim_d
        if not 0 <= d < N / 2:
            raise ValueError(f"trim depth {d} out of range for {N} members")
        lo_sorted = np.sort(lower, axis=0)
        up_sorted = np.sort(upper, axis=0)
        return (lo_sorted[:N - d].mean(axis=0),
                up_sorted[d:].mean(axis=0))
    if weights is None:
        raise ValueError(f"method {spec.method!r} needs member weights")
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != N:
        raise ValueError("weights are not aligned with the members")
    w = w.reshape(w.shape + (1,) * (lower.ndim - w.ndim))
    L = (w * lower).sum(axis=0)
    U = (w * upper).sum(axis=0)
    crossed = (L >= U) & np.isfinite(L) & np.isfinite(U)
    if crossed.any():
        where = np.argwhere(crossed)[0]
        raise EnsembleError(
            f"combined interval collapsed (lower >= upper) at cell "
            f"{tuple(int(i) for i in where)}")
    return L, U


def combine_panel_intervals(panels: Mapping[str, ForecastPanel],
                            spec: IntervalEnsembleSpec,
                            weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Apply an interval rule to panels on the log scale, return rate bounds.

    ``weights`` follows :func:`combine_point`: a WeightVector or an
    age-keyed mapping of them, required for the weighted rules. Returns
    (lower, upper) cubes on the rate scale, NaN where the window has no
    forecast.
    """
    if not panels:
        raise ValueError("no panels to combine")
    models = tuple(panels)
    ref = _check_panel_alignment(panels)
    for m, p in panels.items():
        if p.lower is None or p.upper is None:
            raise EnsembleError(f"{m} carries no intervals")
    with np.errstate(invalid="ignore", divide="ignore"):
        lo = np.stack([np.log(panels[m].lower) for m in models])
        up = np.stack([np.log(panels[m].upper) for m in models])
    w = None
    if spec.method not in ("sa", "it"):
        if weights is None:
            raise ValueError(f"method {spec.method!r} needs member weights")
        w = _weight_matrix(weights, models, ref.ages)[:, :, None, None]
    L, U = combine_interval(lo, up, spec, w)
    return np.exp(L), np.exp(U)
