"""Time-series dynamics of the latent factors and forecast generation.

Period factors kappa follow a joint random walk with drift: drifts are mean
first differences and the innovation covariance is the sample covariance of
the first differences across a model's factors, so simulated paths keep the
factors' co-movement. Cohort curves follow an AR(1) around a linear trend in
the birth-year index. Functional scores follow independent per-component
random walks with drift.

Point forecasts are the zero-innovation paths of these processes, built with
the same cumulative arithmetic as the simulated paths so that an interval
with zero innovation variance collapses onto the point forecast exactly.
Intervals are central quantiles over seeded Gaussian-innovation paths;
parameter uncertainty is deliberately excluded so that the fifteen models'
intervals measure the same thing (process risk).
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .base import FactorDynamics, ForecastGrid, ModelFit

__all__ = ["fit_dynamics", "forecast_point", "simulate_intervals"]


def _rwd(series: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint drift and innovation covariance for stacked series (n, T)."""
    n, T = series.shape
    if T < 2:
        return np.zeros(n), np.zeros((n, n)), series[:, -1].copy()
    diffs = np.diff(series, axis=1)
    drift = diffs.mean(axis=1)
    if diffs.shape[1] >= 2:
        cov = np.atleast_2d(np.cov(diffs, ddof=1))
    else:
        cov = np.zeros((n, n))
    return drift, cov, series[:, -1].copy()


def fit_dynamics(fit: ModelFit) -> ModelFit:
    """Return a copy of the fit with factor time-series models attached."""
    if fit.extra:
        extra = {k: fit_dynamics(v) if isinstance(v, ModelFit) else v
                 for k, v in fit.extra.items()}
        fit = replace(fit, extra=extra)

    kw: dict = {}
    if fit.kappa:
        K = np.vstack(fit.kappa)
        kw["kappa_drift"], kw["kappa_cov"], kw["kappa_last"] = _rwd(K)
    if fit.gamma is not None:
        c = fit.cohorts.astype(float)
        X = np.column_stack([np.ones_like(c), c])
        coef, *_ = np.linalg.lstsq(X, fit.gamma, rcond=None)
        u = fit.gamma - X @ coef
        rho = 0.0
        if u.size >= 3:
            den = float(u[:-1] @ u[:-1])
            if den > 0:
                rho = float(np.clip(u[1:] @ u[:-1] / den, -0.99, 0.99))
        eps = u[1:] - rho * u[:-1]
        sigma = float(np.std(eps, ddof=1)) if eps.size >= 2 else 0.0
        kw.update(
            gamma_intercept=float(coef[0]),
            gamma_slope=float(coef[1]),
            gamma_rho=rho,
            gamma_sigma=sigma,
            gamma_resid_last=float(u[-1]),
            cohort_max=int(fit.cohorts[-1]),
        )
    if fit.fpca is not None:
        drift, _, last = _rwd(fit.fpca.scores.T)
        diffs = np.diff(fit.fpca.scores, axis=0)
        sigma = (np.std(diffs, axis=0, ddof=1) if diffs.shape[0] >= 2
                 else np.zeros(fit.fpca.scores.shape[1]))
        kw.update(score_drift=drift, score_sigma=sigma, score_last=last)
    return replace(fit, dynamics=FactorDynamics(**kw))


def _require_dynamics(fit: ModelFit) -> FactorDynamics:
    if fit.dynamics is None:
        raise ValueError(f"fit of {fit.model!r} has no factor dynamics attached")
    return fit.dynamics


def _gamma_future(fit: ModelFit, n_future: int, innov: np.ndarray | None):
    """Cohort-curve values beyond the last fitted cohort.

    innov has shape (n_paths, n_future) for simulation, or None for the
    deterministic path. Returns (n_paths, n_future) or (n_future,).
    """
    dyn = fit.dynamics
    cmax = dyn.cohort_max
    cs = cmax + 1.0 + np.arange(n_future)
    trend = dyn.gamma_intercept + dyn.gamma_slope * cs
    if innov is None:
        u = np.empty(n_future)
        prev = dyn.gamma_resid_last
        for j in range(n_future):
            prev = dyn.gamma_rho * prev
            u[j] = prev
        return trend + u
    P = innov.shape[0]
    u = np.empty((P, n_future))
    prev = np.full(P, dyn.gamma_resid_last)
    for j in range(n_future):
        prev = dyn.gamma_rho * prev + dyn.gamma_sigma * innov[:, j]
        u[:, j] = prev
    return trend[None, :] + u


def _log_forecast(fit: ModelFit, hs: np.ndarray, n_paths: int | None,
                  rng: np.random.Generator | None) -> np.ndarray:
    """Log-rate forecasts at horizons hs beyond the last fitted year.

    Deterministic (A, H) when n_paths is None, else simulated (P, A, H).
    Horizon 0 is the fitted value at the last year.
    """
    if fit.model == "pr":
        if n_paths is None:
            lp = _log_forecast(fit.extra["product"], hs, None, None)
            lr = _log_forecast(fit.extra["ratio"], hs, None, None)
        else:
            g1, g2 = rng.spawn(2)
            lp = _log_forecast(fit.extra["product"], hs, n_paths, g1)
            lr = _log_forecast(fit.extra["ratio"], hs, n_paths, g2)
        return lp + lr if fit.gender == "M" else lp - lr

    dyn = _require_dynamics(fit)
    A, H = fit.ages.size, hs.size
    sim = n_paths is not None
    Hmax = int(hs.max()) if H else 0
    eta = (np.zeros((n_paths, A, H)) if sim else np.zeros((A, H)))
    if fit.alpha_x is not None:
        eta += fit.alpha_x[None, :, None] if sim else fit.alpha_x[:, None]

    if fit.kappa:
        n_k = len(fit.kappa)
        if sim:
            z = rng.standard_normal((n_paths, n_k, Hmax))
            L = _chol_psd(dyn.kappa_cov)
            incr = dyn.kappa_drift[None, :, None] + np.einsum("ij,pjh->pih", L, z)
        else:
            incr = np.broadcast_to(dyn.kappa_drift[:, None], (n_k, Hmax))
        walk = np.cumsum(incr, axis=-1)
        # position at horizon h; horizon 0 is the last fitted value
        at = np.concatenate(
            [np.zeros(walk.shape[:-1] + (1,)), walk], axis=-1
        )[..., hs] + dyn.kappa_last[..., None]
        for i, b in enumerate(fit.beta):
            if sim:
                eta += b[None, :, None] * at[:, i, None, :]
            else:
                eta += b[:, None] * at[i][None, :]

    if fit.gamma is not None:
        c = fit.years[-1] + hs[None, :] - fit.ages[:, None]   # (A, H)
        n_future = int(max(0, c.max() - dyn.cohort_max))
        fitted = fit.gamma
        ci = np.clip(c - fit.cohorts[0], 0, fitted.size - 1).astype(int)
        base = fitted[ci]                                      # (A, H)
        future_mask = c > dyn.cohort_max
        load = fit.cohort_load if fit.cohort_load is not None else np.ones(A)
        if sim:
            innov = rng.standard_normal((n_paths, n_future)) if n_future else None
            gf = _gamma_future(fit, n_future, innov) if n_future else None
            gvals = np.broadcast_to(base, (n_paths, A, H)).copy()
            if n_future:
                fi = (c - dyn.cohort_max - 1).clip(0).astype(int)
                gvals[:, future_mask] = gf[:, fi[future_mask]]
            eta += load[None, :, None] * gvals
        else:
            gvals = base.copy()
            if n_future:
                gf = _gamma_future(fit, n_future, None)
                fi = (c - dyn.cohort_max - 1).clip(0).astype(int)
                gvals[future_mask] = gf[fi[future_mask]]
            eta += load[:, None] * gvals

    if fit.fpca is not None:
        K = fit.fpca.basis.shape[1]
        if sim:
            z = rng.standard_normal((n_paths, K, Hmax))
            incr = dyn.score_drift[None, :, None] + dyn.score_sigma[None, :, None] * z
        else:
            incr = np.broadcast_to(dyn.score_drift[:, None], (K, Hmax))
        walk = np.cumsum(incr, axis=-1)
        at = np.concatenate(
            [np.zeros(walk.shape[:-1] + (1,)), walk], axis=-1
        )[..., hs] + dyn.score_last[..., None]
        if sim:
            eta += fit.fpca.mean[None, :, None] + np.einsum(
                "ak,pkh->pah", fit.fpca.basis, at)
        else:
            eta += fit.fpca.mean[:, None] + fit.fpca.basis @ at
    return eta


def _chol_psd(C: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(C)
        return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


def _check_horizons(horizons: int) -> np.ndarray:
    H = int(horizons)
    if H < 1:
        raise ValueError("need at least one forecast horizon")
    return np.arange(1, H + 1)


def forecast_point(fit: ModelFit, horizons: int) -> ForecastGrid:
    """Deterministic rate forecasts for horizons 1..horizons."""
    hs = _check_horizons(horizons)
    eta = _log_forecast(fit, hs, None, None)
    return ForecastGrid(
        model=fit.model,
        origin_year=int(fit.years[-1]),
        ages=fit.ages.copy(),
        horizons=hs,
        point=np.exp(eta),
        gender=fit.gender,
        population_id=fit.population_id,
    )


def simulate_intervals(fit: ModelFit, horizons: int, level: float = 0.8,
                       n_paths: int = 1000, seed=0) -> ForecastGrid:
    """Point forecasts plus central 100*level% intervals from Monte Carlo.

    The level is the target coverage (1 - theta). Paths draw Gaussian
    innovations for every factor process; given the same seed the grid is
    reproducible exactly. ``seed`` may be an int or a sequence of ints.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("interval level must be strictly between 0 and 1")
    if n_paths < 1:
        raise ValueError("need at least one simulation path")
    hs = _check_horizons(horizons)
    rng = np.random.default_rng(seed)
    paths = np.exp(_log_forecast(fit, hs, n_paths, rng))
    theta = 1.0 - level
    lower = np.quantile(paths, theta / 2.0, axis=0)
    upper = np.quantile(paths, 1.0 - theta / 2.0, axis=0)
    point = np.exp(_log_forecast(fit, hs, None, None))
    return ForecastGrid(
        model=fit.model,
        origin_year=int(fit.years[-1]),
        ages=fit.ages.copy(),
        horizons=hs,
        point=point,
        lower=np.minimum(lower, upper),
        upper=upper,
        level=level,
        gender=fit.gender,
        population_id=fit.population_id,
    )
