"""Lee-Carter variants fitted by singular value decomposition.

All four share the first stage: alpha_x is the row mean of ln m_{x,t}, and
(beta_x, kappa_t) come from the leading singular triple of the row-centered
log surface, normalized so the loadings sum to one. Because the rows were
centered, the raw kappa series sums to zero by construction.

They differ in the second stage that re-anchors kappa_t year by year:

``lca_none``  no adjustment.
``lca_dt``    kappa_t is moved so total fitted deaths match total observed
              deaths in year t (root found by bracketed Brent).
``lca_dxt``   kappa_t is refitted by per-year Newton steps of the Poisson
              likelihood of the age-specific death counts.
``lca_e0``    kappa_t is moved so the fitted period life expectancy matches
              the observed one to 1e-6 years.

After any adjustment kappa is re-centered into alpha, which changes no
fitted rate and therefore preserves whatever quantity was matched.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from ..data.lifetable import life_table
from ..data.surface import MortalitySurface
from .base import FitMeta, ModelFit
from .poisson import _deviance

__all__ = ["SVD_MODELS", "fit_svd"]


def _first_triple(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leading rank-1 factors of Z with a deterministic sign."""
    U, S, Vt = np.linalg.svd(Z, full_matrices=False)
    u, s, v = U[:, 0], S[0], Vt[0]
    if u.sum() < 0 or (u.sum() == 0 and u[np.argmax(np.abs(u))] < 0):
        u, v = -u, -v
    return u, s * v


def _bracket(f, x0: float, step: float):
    lo, hi = x0 - step, x0 + step
    flo, fhi = f(lo), f(hi)
    for _ in range(80):
        if flo * fhi <= 0:
            return lo, hi
        width = hi - lo
        lo -= width
        hi += width
        flo, fhi = f(lo), f(hi)
    return None


def fit_svd(model: str, surface: MortalitySurface) -> ModelFit:
    """Fit one of the lca_* variants. See the module docstring."""
    adjust = model.removeprefix("lca_")
    Z = surface.log_rates
    A, T = Z.shape
    alpha = Z.mean(axis=1)
    u, kappa_raw = _first_triple(Z - alpha[:, None])
    s = u.sum()
    degenerate = s == 0
    if degenerate:
        beta, kappa = u, kappa_raw
    else:
        beta, kappa = u / s, kappa_raw * s

    failed_years = 0
    if adjust == "dt":
        D = surface.require_deaths("the total-deaths adjustment")
        E = surface.require_exposures("the total-deaths adjustment")
        obs = D.sum(axis=0)
        for t in range(T):
            base = E[:, t] * np.exp(alpha)

            def f(k):
                return float(base @ np.exp(beta * k)) - obs[t]

            bracket = _bracket(f, float(kappa[t]), max(1.0, abs(kappa[t]) * 0.1))
            if bracket is None:
                failed_years += 1
                continue
            kappa[t] = brentq(f, *bracket, xtol=1e-12)
    elif adjust == "dxt":
        D = surface.require_deaths("the per-age Poisson adjustment")
        E = surface.require_exposures("the per-age Poisson adjustment")
        for t in range(T):
            k = float(kappa[t])
            for _ in range(50):
                dhat = E[:, t] * np.exp(alpha + beta * k)
                den = float(beta**2 @ dhat)
                if den <= 0:
                    break
                step = float(beta @ (D[:, t] - dhat)) / den
                k += step
                if abs(step) < 1e-10:
                    break
            kappa[t] = k
    elif adjust == "e0":
        targets = np.array(
            [life_table(surface.rates[:, t], surface.ages).e0 for t in range(T)]
        )
        for t in range(T):

            def f(k):
                return life_table(np.exp(alpha + beta * k), surface.ages).e0 - targets[t]

            bracket = _bracket(f, float(kappa[t]), max(1.0, abs(kappa[t]) * 0.1))
            if bracket is None:
                failed_years += 1
                continue
            kappa[t] = brentq(f, *bracket, xtol=1e-12)
            if abs(f(kappa[t])) > 1e-6:
                failed_years += 1
    elif adjust != "none":
        raise KeyError(model)

    kbar = kappa.mean()
    alpha = alpha + beta * kbar
    kappa = kappa - kbar

    eta = alpha[:, None] + beta[:, None] * kappa[None, :]
    rss = float(np.sum((Z - eta) ** 2))
    dev = None
    if surface.deaths is not None and surface.exposures is not None:
        dev = _deviance(surface.deaths, surface.exposures * np.exp(eta))
    ok = not degenerate and failed_years == 0
    msg = ""
    if degenerate:
        msg = "degenerate loading vector (sums to zero)"
    elif failed_years:
        msg = f"adjustment bracket failed for {failed_years} year(s)"
    return ModelFit(
        model=model,
        ages=surface.ages.copy(),
        years=surface.years.copy(),
        alpha_x=alpha,
        beta=(beta,),
        kappa=(kappa,),
        constraint_residuals={
            "sum_kappa1": float(kappa.sum()),
            "sum_beta1": float(beta.sum() - 1.0),
        },
        fit_meta=FitMeta(deviance=None if dev is None else float(dev),
                         rss_log=rss, k=2 * A + T - 2,
                         converged=bool(ok), n_iter=1, message=msg),
        gender=surface.gender,
        population_id=surface.population_id,
    )


SVD_MODELS = {name: fit_svd for name in ("lca_dt", "lca_dxt", "lca_e0", "lca_none")}
