"""Shared containers for the fifteen mortality models.

Every fitter returns a :class:`ModelFit` holding the estimated pieces of the
log-rate predictor

    ln m_hat(x, t) = alpha_x + sum_i beta_i(x) * kappa_i(t)
                     + cohort_load(x) * gamma(t - x)
                     [+ fpca mean/basis reconstruction]

together with fitted factor dynamics, constraint residuals, and fit
diagnostics. Deterministic age loadings (the CBD family bases) are stored
evaluated on the age grid, so the predictor is a plain linear combination
regardless of the model family.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

__all__ = [
    "MODEL_IDS",
    "FitError",
    "FitMeta",
    "Fpca",
    "FactorDynamics",
    "ModelFit",
    "ForecastGrid",
    "log_fitted",
    "fit_to_json",
    "fit_from_json",
]

# canonical order: Renshaw-Haberman family, CBD family, Lee-Carter variants
# by their second-stage adjustment, functional models
MODEL_IDS = (
    "lc",
    "rh",
    "apc",
    "cbd",
    "m6",
    "m7",
    "m8",
    "plat",
    "lca_dt",
    "lca_dxt",
    "lca_e0",
    "lca_none",
    "fdm",
    "robust_fdm",
    "pr",
)


class FitError(RuntimeError):
    """Raised when a model cannot be fitted at all (bad inputs, no data)."""


@dataclass(frozen=True)
class FitMeta:
    """Fit diagnostics.

    deviance is the Poisson deviance when death counts were available and
    None otherwise; rss_log is the residual sum of squares on the log-rate
    scale and is always filled. k counts effective parameters (raw minus
    identifiability constraints). Non-convergence is reported here via
    ``converged`` and ``message`` rather than by raising.
    """

    deviance: float | None
    rss_log: float
    k: int
    converged: bool
    n_iter: int
    message: str = ""


@dataclass(frozen=True)
class Fpca:
    """Functional decomposition: mean curve, orthonormal basis, scores."""

    mean: np.ndarray        # (A,)
    basis: np.ndarray       # (A, K), columns orthonormal in the discrete dot product
    scores: np.ndarray      # (T, K)
    weights: np.ndarray     # (T,) per-year weights used in the fit (0 = excluded)


@dataclass(frozen=True)
class FactorDynamics:
    """Fitted time-series models for the latent factors.

    Period factors follow a joint random walk with drift (full innovation
    covariance across a model's kappa factors). The cohort curve follows an
    AR(1) around a linear trend in cohort index. Functional scores follow
    independent per-component random walks with drift.
    """

    kappa_drift: np.ndarray | None = None   # (n_k,)
    kappa_cov: np.ndarray | None = None     # (n_k, n_k)
    kappa_last: np.ndarray | None = None    # (n_k,)
    gamma_intercept: float | None = None
    gamma_slope: float | None = None
    gamma_rho: float | None = None
    gamma_sigma: float | None = None
    gamma_resid_last: float | None = None
    cohort_max: int | None = None
    score_drift: np.ndarray | None = None   # (K,)
    score_sigma: np.ndarray | None = None   # (K,)
    score_last: np.ndarray | None = None    # (K,)


@dataclass(frozen=True)
class ModelFit:
    """Complete fitted state of one mortality model on one training window."""

    model: str
    ages: np.ndarray
    years: np.ndarray
    alpha_x: np.ndarray | None = None
    beta: tuple[np.ndarray, ...] = ()       # age loading per kappa factor, evaluated
    kappa: tuple[np.ndarray, ...] = ()      # one series per factor, aligned with years
    gamma: np.ndarray | None = None         # cohort curve, aligned with cohorts
    cohorts: np.ndarray | None = None       # birth years c = t - x
    cohort_load: np.ndarray | None = None   # age loading multiplying gamma
    age_centering: dict[str, float] = field(default_factory=dict)
    fpca: Fpca | None = None
    dynamics: FactorDynamics | None = None
    constraint_residuals: dict[str, float] = field(default_factory=dict)
    fit_meta: FitMeta = field(default_factory=lambda: FitMeta(None, 0.0, 0, True, 0))
    gender: str = "F"
    population_id: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def n_factors(self) -> int:
        return len(self.kappa)

    def with_factors(self, **changes) -> "ModelFit":
        """Return a copy with selected fields replaced (gauge experiments)."""
        return replace(self, **changes)


def log_fitted(fit: ModelFit) -> np.ndarray:
    """In-sample fitted log rates, shape (n_ages, n_years).

    For the product-ratio model this recombines the product and ratio child
    fits for the fit's own gender.
    """
    if fit.model == "pr":
        lp = log_fitted(fit.extra["product"])
        lr = log_fitted(fit.extra["ratio"])
        return lp + lr if fit.gender == "M" else lp - lr
    A, T = fit.ages.size, fit.years.size
    eta = np.zeros((A, T))
    if fit.alpha_x is not None:
        eta += fit.alpha_x[:, None]
    for b, k in zip(fit.beta, fit.kappa):
        eta += b[:, None] * k[None, :]
    if fit.gamma is not None:
        ci = _cohort_index(fit)
        load = fit.cohort_load if fit.cohort_load is not None else np.ones(A)
        eta += load[:, None] * fit.gamma[ci]
    if fit.fpca is not None:
        eta += fit.fpca.mean[:, None] + fit.fpca.basis @ fit.fpca.scores.T
    return eta


def _cohort_index(fit: ModelFit) -> np.ndarray:
    """(A, T) indices into fit.gamma for every in-sample cell."""
    c = fit.years[None, :] - fit.ages[:, None]
    return (c - fit.cohorts[0]).astype(int)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------
#
# Schema (all arrays as nested lists, None for absent parts):
# {
#   "model": str, "gender": str, "population_id": str,
#   "ages": [int], "years": [int],
#   "alpha_x": [float] | null,
#   "beta": [[float]], "kappa": [[float]],
#   "gamma": [float] | null, "cohorts": [int] | null,
#   "cohort_load": [float] | null,
#   "age_centering": {str: float},
#   "fpca": {"mean": [...], "basis": [[...]], "scores": [[...]],
#            "weights": [...]} | null,
#   "dynamics": {field: value-or-list} | null,
#   "constraint_residuals": {str: float},
#   "fit_meta": {"deviance": float|null, "rss_log": float, "k": int,
#                "converged": bool, "n_iter": int, "message": str},
#   "extra": {"product"/"ratio": <nested fit>} when present
# }


def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def fit_to_json(fit: ModelFit) -> str:
    """Serialize a fit to the documented JSON schema."""
    dyn = None
    if fit.dynamics is not None:
        dyn = {k: _arr(v) if isinstance(v, np.ndarray) else v
               for k, v in vars(fit.dynamics).items()}
    fp = None
    if fit.fpca is not None:
        fp = {
            "mean": _arr(fit.fpca.mean),
            "basis": _arr(fit.fpca.basis),
            "scores": _arr(fit.fpca.scores),
            "weights": _arr(fit.fpca.weights),
        }
    doc = {
        "model": fit.model,
        "gender": fit.gender,
        "population_id": fit.population_id,
        "ages": _arr(fit.ages),
        "years": _arr(fit.years),
        "alpha_x": _arr(fit.alpha_x),
        "beta": [_arr(b) for b in fit.beta],
        "kappa": [_arr(k) for k in fit.kappa],
        "gamma": _arr(fit.gamma),
        "cohorts": _arr(fit.cohorts),
        "cohort_load": _arr(fit.cohort_load),
        "age_centering": dict(fit.age_centering),
        "fpca": fp,
        "dynamics": dyn,
        "constraint_residuals": dict(fit.constraint_residuals),
        "fit_meta": vars(fit.fit_meta).copy(),
        "extra": {k: json.loads(fit_to_json(v)) for k, v in fit.extra.items()
                  if isinstance(v, ModelFit)},
    }
    return json.dumps(doc)


def fit_from_json(text: str) -> ModelFit:
    """Rebuild a ModelFit from :func:`fit_to_json` output."""
    doc = json.loads(text) if isinstance(text, str) else text

    def arr(x, dtype=float):
        return None if x is None else np.asarray(x, dtype=dtype)

    dyn = None
    if doc["dynamics"] is not None:
        d = dict(doc["dynamics"])
        for key in ("kappa_drift", "kappa_cov", "kappa_last",
                    "score_drift", "score_sigma", "score_last"):
            d[key] = arr(d.get(key))
        dyn = FactorDynamics(**d)
    fp = None
    if doc["fpca"] is not None:
        f = doc["fpca"]
        fp = Fpca(arr(f["mean"]), arr(f["basis"]), arr(f["scores"]),
                  arr(f["weights"]))
    extra = {k: fit_from_json(json.dumps(v)) for k, v in doc.get("extra", {}).items()}
    return ModelFit(
        model=doc["model"],
        ages=arr(doc["ages"], int),
        years=arr(doc["years"], int),
        alpha_x=arr(doc["alpha_x"]),
        beta=tuple(arr(b) for b in doc["beta"]),
        kappa=tuple(arr(k) for k in doc["kappa"]),
        gamma=arr(doc["gamma"]),
        cohorts=arr(doc["cohorts"], int),
        cohort_load=arr(doc["cohort_load"]),
        age_centering=dict(doc["age_centering"]),
        fpca=fp,
        dynamics=dyn,
        constraint_residuals=dict(doc["constraint_residuals"]),
        fit_meta=FitMeta(**doc["fit_meta"]),
        gender=doc["gender"],
        population_id=doc["population_id"],
        extra=extra,
    )


@dataclass(frozen=True)
class ForecastGrid:
    """Point forecasts (and optionally interval endpoints) from one origin.

    Rates are on the natural scale. ``point[i, j]`` forecasts age
    ``ages[i]`` at horizon ``horizons[j]`` beyond ``origin_year``. Interval
    endpoints satisfy lower <= upper; they coincide when a single simulated
    path was requested.
    """

    model: str
    origin_year: int
    ages: np.ndarray
    horizons: np.ndarray
    point: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    level: float | None = None
    gender: str = "F"
    population_id: str = ""

    def __post_init__(self):
        if self.point.shape != (self.ages.size, self.horizons.size):
            raise ValueError("point grid shape does not match ages x horizons")
        if not np.all(self.point > 0):
            raise ValueError("point forecasts must be positive rates")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper must be given together")
        if self.lower is not None:
            if self.lower.shape != self.point.shape or self.upper.shape != self.point.shape:
                raise ValueError("interval grids must match the point grid shape")
            if not np.all(self.lower > 0):
                raise ValueError("interval endpoints must be positive rates")
            if np.any(self.lower > self.upper):
                raise ValueError("lower endpoint exceeds upper endpoint")
