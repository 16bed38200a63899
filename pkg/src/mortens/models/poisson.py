"""Poisson maximum-likelihood fitters for the bilinear mortality models.

Deaths are modelled as D_{x,t} ~ Poisson(E_{x,t} * exp(eta_{x,t})) with a
model-specific linear predictor:

    lc    eta = alpha_x + beta_x kappa_t
    rh    eta = alpha_x + beta_x kappa_t + beta0_x gamma_{t-x}
    apc   eta = alpha_x + kappa_t + gamma_{t-x}
    cbd   eta = kappa1_t + (x - xbar) kappa2_t
    m6    eta = cbd + gamma_{t-x}
    m7    eta = cbd + ((x - xbar)^2 - sigma2_x) kappa3_t + gamma_{t-x}
    m8    eta = cbd + (x_c - x) gamma_{t-x},  x_c = max age + 1
    plat  eta = alpha_x + kappa1_t + (x - xbar) kappa2_t
                + (x - xbar)^+ kappa3_t + gamma_{t-x}

Estimation is coordinate-wise Newton: each parameter block is updated in
turn by one Newton step of the Poisson log likelihood holding the others
fixed, cycling until the deviance change is below 1e-8 relative (or 500
cycles, in which case the fit is flagged, not raised). The identifiability
projection of each model is applied after every cycle as well as at the
end; it never changes the fitted predictor, but without it the cohort
models crawl along their exactly flat gauge directions (a cohort-curve
trend is indistinguishable from an age trend plus a period trend) and the
deviance stalls.

Cohorts are indexed by birth year c = t - x and all A + T - 1 cohorts are
kept, including the single-cell corners.
"""
from __future__ import annotations

import math

import numpy as np

from ..data.surface import MortalitySurface
from .base import FitMeta, ModelFit

__all__ = ["POISSON_MODELS", "fit_poisson"]

_TOL = 1e-8
_MAX_ITER = 500
# keep exp() finite while a mid-iteration overshoot is being corrected
_ETA_LO, _ETA_HI = -40.0, 10.0


def _deviance(D: np.ndarray, Dhat: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(D > 0, D * np.log(D / Dhat), 0.0)
    return float(2.0 * np.sum(term - (D - Dhat)))


def _safe_div(num, den):
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _exact_dot(weights: np.ndarray, values: np.ndarray) -> float:
    """Dot product in extended precision; used wherever a cohort constraint
    mixes O(1) coefficients with birth-year monomials that reach 1e6."""
    w = np.asarray(weights, dtype=np.longdouble)
    v = np.asarray(values, dtype=np.longdouble)
    return float((w * v).sum())


def _detrend(gamma: np.ndarray, cohorts: np.ndarray, powers: tuple[int, ...],
             polish: int = 1):
    """Coefficients and residual of gamma regressed on [c**p for p in powers].

    c is a birth year, so c^2 reaches a few millions and a plain least
    squares solve leaves orthogonality defects of order 1e-7. Worse, merely
    storing the residual in float64 re-rounds every entry, which alone
    perturbs sum(c^2 * resid) by a few 1e-9 of either sign. Each polish
    pass measures the defects in extended precision, removes them through
    the 2x2 normal system, and thereby redraws that rounding; keeping the
    best draw seen gets the final defect to ~1e-9 within a handful of
    passes. Callers that only need the gauge direction pinned (the
    per-cycle projections) use polish=1; the final projection polishes
    harder.
    """
    X = np.column_stack([cohorts.astype(float) ** p for p in powers])
    coef, *_ = np.linalg.lstsq(X, gamma, rcond=None)
    resid = gamma - X @ coef
    Xl = X.astype(np.longdouble)
    g00 = float((Xl[:, 0] * Xl[:, 0]).sum())
    g01 = float((Xl[:, 0] * Xl[:, 1]).sum())
    g11 = float((Xl[:, 1] * Xl[:, 1]).sum())
    det = np.longdouble(g00) * np.longdouble(g11) - np.longdouble(g01) ** 2
    if det == 0:
        return coef, resid
    best = (np.inf, coef, resid)
    for _ in range(max(1, polish)):
        d = Xl.T @ resid.astype(np.longdouble)
        worst = float(np.max(np.abs(d)))
        if worst < best[0]:
            best = (worst, coef, resid)
        if worst <= 2e-9:
            break
        delta = np.array([float((d[0] * g11 - d[1] * g01) / det),
                          float((g00 * d[1] - g01 * d[0]) / det)])
        coef = coef + delta
        resid = resid - X @ delta
    return best[1], best[2]


class _Design:
    """Mutable fitting state for one model on one training window."""

    def __init__(self, surface: MortalitySurface, *, has_alpha: bool,
                 kappa_loads: list[np.ndarray], cohort_load: np.ndarray | None):
        self.D = surface.require_deaths("Poisson fitting")
        self.E = surface.require_exposures("Poisson fitting")
        self.log_m = surface.log_rates
        self.ages = surface.ages
        self.years = surface.years
        A, T = self.D.shape
        self.alpha = None
        if has_alpha:
            # start from the crude all-years log rate of each age row
            with np.errstate(divide="ignore"):
                self.alpha = np.log(self.D.sum(axis=1) / self.E.sum(axis=1))
            bad = ~np.isfinite(self.alpha)
            if bad.any():
                self.alpha[bad] = self.log_m[bad].mean(axis=1)
        self.loads = [np.array(l, dtype=float) for l in kappa_loads]
        self.kappa = [np.zeros(T) for _ in kappa_loads]
        if not has_alpha and kappa_loads:
            # CBD family: seed the level factor with the yearly mean log rate
            self.kappa[0] = self.log_m.mean(axis=0)
        self.cohort_load = None if cohort_load is None else np.array(cohort_load, dtype=float)
        self.gamma = None
        self.cohorts = None
        self.ci = None
        if cohort_load is not None:
            c = self.years[None, :] - self.ages[:, None]
            self.cohorts = np.arange(c.min(), c.max() + 1)
            self.ci = (c - c.min()).astype(int)
            self.gamma = np.zeros(self.cohorts.size)

    def eta(self) -> np.ndarray:
        out = np.zeros_like(self.D, dtype=float)
        if self.alpha is not None:
            out += self.alpha[:, None]
        for load, k in zip(self.loads, self.kappa):
            out += load[:, None] * k[None, :]
        if self.gamma is not None:
            out += self.cohort_load[:, None] * self.gamma[self.ci]
        return out

    def dhat(self) -> np.ndarray:
        return self.E * np.exp(np.clip(self.eta(), _ETA_LO, _ETA_HI))

    # one Newton step per block, fresh fitted deaths each time ------------

    def step_alpha(self):
        Dh = self.dhat()
        self.alpha += _safe_div((self.D - Dh).sum(axis=1), Dh.sum(axis=1))

    def step_kappa(self, i: int):
        Dh = self.dhat()
        u = self.loads[i][:, None]
        self.kappa[i] += _safe_div((u * (self.D - Dh)).sum(axis=0),
                                   (u * u * Dh).sum(axis=0))

    def step_load(self, i: int):
        Dh = self.dhat()
        k = self.kappa[i][None, :]
        self.loads[i] += _safe_div((k * (self.D - Dh)).sum(axis=1),
                                   (k * k * Dh).sum(axis=1))

    def step_gamma(self):
        Dh = self.dhat()
        l = self.cohort_load[:, None]
        num = np.bincount(self.ci.ravel(), weights=(l * (self.D - Dh)).ravel(),
                          minlength=self.cohorts.size)
        den = np.bincount(self.ci.ravel(), weights=(l * l * Dh).ravel(),
                          minlength=self.cohorts.size)
        self.gamma += _safe_div(num, den)

    def step_cohort_load(self):
        Dh = self.dhat()
        g = self.gamma[self.ci]
        self.cohort_load += _safe_div((g * (self.D - Dh)).sum(axis=1),
                                      (g * g * Dh).sum(axis=1))

    def run(self, steps, project=None) -> tuple[float, int, bool]:
        dev = _deviance(self.D, self.dhat())
        for it in range(1, _MAX_ITER + 1):
            for step in steps:
                step()
            if project is not None:
                project()
            new = _deviance(self.D, self.dhat())
            done = abs(dev - new) <= _TOL * (abs(new) + _TOL) or new < 1e-10
            dev = new
            if done:
                return dev, it, True
        return dev, _MAX_ITER, False


def _finish(d: _Design, model: str, k: int, dev: float, n_iter: int,
            converged: bool, surface: MortalitySurface,
            age_centering: dict, residuals: dict) -> ModelFit:
    eta = d.eta()
    rss = float(np.sum((d.log_m - eta) ** 2))
    msg = "" if converged else "deviance still moving after 500 cycles"
    return ModelFit(
        model=model,
        ages=d.ages.copy(),
        years=d.years.copy(),
        alpha_x=None if d.alpha is None else d.alpha.copy(),
        beta=tuple(l.copy() for l in d.loads),
        kappa=tuple(kk.copy() for kk in d.kappa),
        gamma=None if d.gamma is None else d.gamma.copy(),
        cohorts=None if d.cohorts is None else d.cohorts.copy(),
        cohort_load=None if d.cohort_load is None else d.cohort_load.copy(),
        age_centering={k_: float(v) for k_, v in age_centering.items()},
        constraint_residuals={k_: float(v) for k_, v in residuals.items()},
        fit_meta=FitMeta(deviance=float(dev), rss_log=rss, k=int(k),
                         converged=bool(converged), n_iter=int(n_iter),
                         message=msg),
        gender=surface.gender,
        population_id=surface.population_id,
    )


# ---------------------------------------------------------------------------
# the eight fitters
# ---------------------------------------------------------------------------

def _fit_lc(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    d = _Design(surface, has_alpha=True, kappa_loads=[np.full(A, 1.0 / A)],
                cohort_load=None)

    def project():
        beta, kappa = d.loads[0], d.kappa[0]
        s = beta.sum()
        if s != 0:
            beta /= s
            kappa *= s
        kbar = kappa.mean()
        d.alpha += beta * kbar
        kappa -= kbar

    dev, it, ok = d.run([d.step_alpha, lambda: d.step_kappa(0),
                         lambda: d.step_load(0)], project)
    project()
    res = {"sum_kappa1": d.kappa[0].sum(), "sum_beta1": d.loads[0].sum() - 1.0}
    return _finish(d, "lc", 2 * A + T - 2, dev, it, ok, surface, {}, res)


def _fit_rh(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    lc = _fit_lc(surface)
    d = _Design(surface, has_alpha=True, kappa_loads=[lc.beta[0].copy()],
                cohort_load=np.full(A, 1.0 / A))
    d.alpha = lc.alpha_x.copy()
    d.kappa[0] = lc.kappa[0].copy()

    def project():
        beta, kappa = d.loads[0], d.kappa[0]
        s1 = beta.sum()
        if s1 != 0:
            beta /= s1
            kappa *= s1
        kbar = kappa.mean()
        d.alpha += beta * kbar
        kappa -= kbar
        s0 = d.cohort_load.sum()
        if s0 != 0:
            d.cohort_load /= s0
            d.gamma *= s0
        # gamma location is a leftover gauge; pin it by centering into alpha
        gbar = d.gamma.mean()
        d.alpha += d.cohort_load * gbar
        d.gamma -= gbar

    dev, it, ok = d.run([d.step_alpha, lambda: d.step_kappa(0),
                         lambda: d.step_load(0), d.step_gamma,
                         d.step_cohort_load], project)
    project()
    res = {
        "sum_kappa1": d.kappa[0].sum(),
        "sum_beta1": d.loads[0].sum() - 1.0,
        "sum_beta0": d.cohort_load.sum() - 1.0,
        "sum_gamma": d.gamma.sum(),
    }
    return _finish(d, "rh", 3 * A + T + d.cohorts.size - 4, dev, it, ok,
                   surface, {}, res)


def _fit_apc(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    d = _Design(surface, has_alpha=True, kappa_loads=[np.ones(A)],
                cohort_load=np.ones(A))

    def project(polish=1):
        (a, b), d.gamma = _detrend(d.gamma, d.cohorts, (0, 1), polish)
        # gamma_c -= a + b c with c = t - x splits as (a + b t) - b x
        d.kappa[0] += a + b * d.years
        d.alpha -= b * d.ages
        kbar = d.kappa[0].mean()
        d.alpha += kbar
        d.kappa[0] -= kbar

    dev, it, ok = d.run([d.step_alpha, lambda: d.step_kappa(0), d.step_gamma],
                        project)
    project(30)
    c = d.cohorts.astype(float)
    res = {
        "sum_kappa1": d.kappa[0].sum(),
        "sum_gamma": d.gamma.sum(),
        "sum_c_gamma": _exact_dot(c, d.gamma),
    }
    return _finish(d, "apc", A + T + d.cohorts.size - 3, dev, it, ok,
                   surface, {}, res)


def _cbd_loads(ages: np.ndarray, quad: bool = False, plus: bool = False):
    x = ages.astype(float)
    xbar = x.mean()
    loads = [np.ones(x.size), x - xbar]
    centering = {"x_bar": float(xbar)}
    if quad:
        s2 = float(np.mean((x - xbar) ** 2))
        loads.append((x - xbar) ** 2 - s2)
        centering["sigma2_x"] = s2
    if plus:
        loads.append(np.maximum(x - xbar, 0.0))
    return loads, centering


def _fit_cbd(surface: MortalitySurface) -> ModelFit:
    T = surface.n_years
    loads, centering = _cbd_loads(surface.ages)
    d = _Design(surface, has_alpha=False, kappa_loads=loads, cohort_load=None)
    dev, it, ok = d.run([lambda: d.step_kappa(0), lambda: d.step_kappa(1)])
    return _finish(d, "cbd", 2 * T, dev, it, ok, surface, centering, {})


def _fit_m6(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    loads, centering = _cbd_loads(surface.ages)
    xbar = centering["x_bar"]
    d = _Design(surface, has_alpha=False, kappa_loads=loads,
                cohort_load=np.ones(A))

    def project(polish=1):
        (a, b), d.gamma = _detrend(d.gamma, d.cohorts, (0, 1), polish)
        # a + b(t - x) = [a + b t - b xbar] - b (x - xbar)
        d.kappa[0] += a + b * d.years - b * xbar
        d.kappa[1] -= b

    dev, it, ok = d.run([lambda: d.step_kappa(0), lambda: d.step_kappa(1),
                         d.step_gamma], project)
    project(30)
    c = d.cohorts.astype(float)
    res = {"sum_gamma": d.gamma.sum(),
           "sum_c_gamma": _exact_dot(c, d.gamma)}
    return _finish(d, "m6", 2 * T + d.cohorts.size - 2, dev, it, ok,
                   surface, centering, res)


def _fit_m7(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    loads, centering = _cbd_loads(surface.ages, quad=True)
    xbar, s2 = centering["x_bar"], centering["sigma2_x"]
    d = _Design(surface, has_alpha=False, kappa_loads=loads,
                cohort_load=np.ones(A))

    def project(polish=1):
        (a, q), d.gamma = _detrend(d.gamma, d.cohorts, (0, 2), polish)
        # a + q(t-x)^2 with (t-x)^2 = (t-xbar)^2 - 2(t-xbar)(x-xbar) + (x-xbar)^2
        # and (x-xbar)^2 = [(x-xbar)^2 - sigma2] + sigma2
        tc = d.years - xbar
        d.kappa[0] += a + q * tc**2 + q * s2
        d.kappa[1] -= 2.0 * q * tc
        d.kappa[2] += q

    dev, it, ok = d.run([lambda: d.step_kappa(0), lambda: d.step_kappa(1),
                         lambda: d.step_kappa(2), d.step_gamma], project)
    project(30)
    c = d.cohorts.astype(float)
    res = {"sum_gamma": d.gamma.sum(),
           "sum_c2_gamma": _exact_dot(c**2, d.gamma)}
    return _finish(d, "m7", 3 * T + d.cohorts.size - 2, dev, it, ok,
                   surface, centering, res)


def _fit_m8(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    loads, centering = _cbd_loads(surface.ages)
    x_c = float(surface.ages.max() + 1)
    centering["x_c"] = x_c
    xbar = centering["x_bar"]
    d = _Design(surface, has_alpha=False, kappa_loads=loads,
                cohort_load=x_c - surface.ages.astype(float))

    def project():
        gbar = d.gamma.mean()
        d.gamma -= gbar
        # (x_c - x) gbar = gbar (x_c - xbar) - gbar (x - xbar)
        d.kappa[0] += gbar * (x_c - xbar)
        d.kappa[1] -= gbar

    dev, it, ok = d.run([lambda: d.step_kappa(0), lambda: d.step_kappa(1),
                         d.step_gamma], project)
    project()
    res = {"sum_gamma": d.gamma.sum()}
    return _finish(d, "m8", 2 * T + d.cohorts.size - 1, dev, it, ok,
                   surface, centering, res)


def _fit_plat(surface: MortalitySurface) -> ModelFit:
    A, T = surface.n_ages, surface.n_years
    loads, centering = _cbd_loads(surface.ages, plus=True)
    xbar = centering["x_bar"]
    d = _Design(surface, has_alpha=True, kappa_loads=loads,
                cohort_load=np.ones(A))

    def project(polish=1):
        (a, q), d.gamma = _detrend(d.gamma, d.cohorts, (0, 2), polish)
        # a + q(t-x)^2 = a + q t^2 - 2qt xbar - 2qt (x - xbar) + q x^2
        t = d.years.astype(float)
        d.kappa[0] += a + q * t**2 - 2.0 * q * t * xbar
        d.kappa[1] -= 2.0 * q * t
        d.alpha += q * d.ages.astype(float) ** 2
        for i, load in enumerate(d.loads):
            kbar = d.kappa[i].mean()
            d.alpha += load * kbar
            d.kappa[i] -= kbar

    dev, it, ok = d.run([d.step_alpha, lambda: d.step_kappa(0),
                         lambda: d.step_kappa(1), lambda: d.step_kappa(2),
                         d.step_gamma], project)
    project(30)
    c = d.cohorts.astype(float)
    res = {
        "sum_kappa1": d.kappa[0].sum(),
        "sum_kappa2": d.kappa[1].sum(),
        "sum_kappa3": d.kappa[2].sum(),
        "sum_gamma": d.gamma.sum(),
        "sum_c2_gamma": _exact_dot(c**2, d.gamma),
    }
    return _finish(d, "plat", A + 3 * T + d.cohorts.size - 5, dev, it, ok,
                   surface, centering, res)


POISSON_MODELS = {
    "lc": _fit_lc,
    "rh": _fit_rh,
    "apc": _fit_apc,
    "cbd": _fit_cbd,
    "m6": _fit_m6,
    "m7": _fit_m7,
    "m8": _fit_m8,
    "plat": _fit_plat,
}


def fit_poisson(model: str, surface: MortalitySurface) -> ModelFit:
    """Fit one of the Poisson-likelihood models. See the module docstring."""
    return POISSON_MODELS[model](surface)
