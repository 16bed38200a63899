"""Functional time-series models on smoothed log-rate curves.

Each year's ln m_.t is first smoothed over age with a penalized cubic
spline whose penalty is chosen by generalized cross-validation. The smoothed
curves are decomposed about their mean curve with a discrete functional PCA
(an SVD of the centered matrix), giving K orthonormal basis functions of age
and one score series per basis function.

``robust_fdm`` guards the decomposition against aberrant years: any year
whose integrated squared reconstruction residual exceeds the median plus
three (unscaled) median absolute deviations is excluded, the mean and basis
are re-estimated without it, and the scores of every year, including the
excluded ones, are obtained by projecting onto the new basis. When nothing
is flagged the initial decomposition is returned unchanged, so the robust
fit coincides with the plain one exactly.

The product-ratio model decomposes the two genders jointly: it fits the
machinery above to the log geometric mean p and the log square-rooted ratio
r of the male and female surfaces (r keeps the male rates in the numerator),
and recombines as m_M = p * r and m_F = p / r.
"""
from __future__ import annotations

import numpy as np
from scipy.interpolate import make_smoothing_spline

from ..data.surface import MortalitySurface
from .base import FitMeta, Fpca, ModelFit
from .poisson import _deviance

__all__ = ["fit_fdm", "fit_pr", "FUNCTIONAL_MODELS"]

_DEFAULT_K = 6


def _smooth_columns(Z: np.ndarray, ages: np.ndarray) -> np.ndarray:
    if ages.size < 5:
        return Z.copy()
    x = ages.astype(float)
    out = np.empty_like(Z)
    for t in range(Z.shape[1]):
        try:
            out[:, t] = make_smoothing_spline(x, Z[:, t])(x)
        except Exception:
            out[:, t] = Z[:, t]
    return out


def _flip_signs(basis: np.ndarray, scores: np.ndarray):
    for k in range(basis.shape[1]):
        col = basis[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, k] = -col
            scores[:, k] = -scores[:, k]


def _decompose(Zs: np.ndarray, K: int, keep: np.ndarray) -> Fpca:
    """Mean and K-dimensional orthonormal basis from the kept years,
    scores for every year by projection."""
    mean = Zs[:, keep].mean(axis=1)
    R = Zs - mean[:, None]
    U, _, _ = np.linalg.svd(R[:, keep], full_matrices=False)
    basis = U[:, :K].copy()
    scores = R.T @ basis
    _flip_signs(basis, scores)
    weights = keep.astype(float)
    return Fpca(mean=mean, basis=basis, scores=scores, weights=weights)


def _fit_functional(Z: np.ndarray, ages: np.ndarray, K: int, robust: bool) -> Fpca:
    T = Z.shape[1]
    Zs = _smooth_columns(Z, ages)
    K = max(1, min(K, ages.size, T))
    fp = _decompose(Zs, K, np.ones(T, dtype=bool))
    if not robust:
        return fp
    recon = fp.mean[:, None] + fp.basis @ fp.scores.T
    r = ((Zs - recon) ** 2).sum(axis=0)
    med = np.median(r)
    mad = np.median(np.abs(r - med))
    flagged = r > med + 3.0 * mad
    if not flagged.any():
        return fp
    keep = ~flagged
    K = max(1, min(K, int(keep.sum())))
    return _decompose(Zs, K, keep)


def _functional_meta(surface: MortalitySurface, fp: Fpca) -> tuple[float, float | None, int]:
    A, T = surface.n_ages, surface.n_years
    recon = fp.mean[:, None] + fp.basis @ fp.scores.T
    rss = float(np.sum((surface.log_rates - recon) ** 2))
    dev = None
    if surface.deaths is not None and surface.exposures is not None:
        dev = float(_deviance(surface.deaths, surface.exposures * np.exp(recon)))
    k = int(A + fp.basis.shape[1] * (A + T))
    return rss, dev, k


def fit_fdm(model: str, surface: MortalitySurface,
            n_components: int = _DEFAULT_K) -> ModelFit:
    """Fit ``fdm`` or ``robust_fdm``."""
    fp = _fit_functional(surface.log_rates, surface.ages, n_components,
                         robust=(model == "robust_fdm"))
    rss, dev, k = _functional_meta(surface, fp)
    ortho = fp.basis.T @ fp.basis - np.eye(fp.basis.shape[1])
    return ModelFit(
        model=model,
        ages=surface.ages.copy(),
        years=surface.years.copy(),
        fpca=fp,
        constraint_residuals={"basis_orthonormality": float(np.abs(ortho).max())},
        fit_meta=FitMeta(deviance=dev, rss_log=rss, k=k, converged=True,
                         n_iter=1),
        gender=surface.gender,
        population_id=surface.population_id,
    )


def fit_pr(surface: MortalitySurface, companion: MortalitySurface,
           n_components: int = _DEFAULT_K) -> ModelFit:
    """Fit the product-ratio model; ``surface`` sets the output gender."""
    if companion is None:
        raise ValueError("the product-ratio model needs the other gender's surface")
    if surface.gender == companion.gender:
        raise ValueError("product-ratio companions must be opposite genders")
    if not (np.array_equal(surface.ages, companion.ages)
            and np.array_equal(surface.years, companion.years)):
        raise ValueError("product-ratio companions must share the age and year grid")
    male, female = ((surface, companion) if surface.gender == "M"
                    else (companion, surface))
    lp = 0.5 * (male.log_rates + female.log_rates)
    lr = 0.5 * (male.log_rates - female.log_rates)

    children = {}
    for tag, Z in (("product", lp), ("ratio", lr)):
        fp = _fit_functional(Z, surface.ages, n_components, robust=False)
        recon = fp.mean[:, None] + fp.basis @ fp.scores.T
        children[tag] = ModelFit(
            model="fdm",
            ages=surface.ages.copy(),
            years=surface.years.copy(),
            fpca=fp,
            fit_meta=FitMeta(deviance=None,
                             rss_log=float(np.sum((Z - recon) ** 2)),
                             k=surface.n_ages + fp.basis.shape[1]
                             * (surface.n_ages + surface.n_years),
                             converged=True, n_iter=1),
            gender=surface.gender,
            population_id=f"{surface.population_id}:{tag}",
        )

    sign = 1.0 if surface.gender == "M" else -1.0
    own_recon = (children["product"].fpca.mean + sign * children["ratio"].fpca.mean)[:, None] \
        + children["product"].fpca.basis @ children["product"].fpca.scores.T \
        + sign * (children["ratio"].fpca.basis @ children["ratio"].fpca.scores.T)
    rss = float(np.sum((surface.log_rates - own_recon) ** 2))
    dev = None
    if surface.deaths is not None and surface.exposures is not None:
        dev = float(_deviance(surface.deaths, surface.exposures * np.exp(own_recon)))
    k = children["product"].fit_meta.k + children["ratio"].fit_meta.k
    return ModelFit(
        model="pr",
        ages=surface.ages.copy(),
        years=surface.years.copy(),
        fit_meta=FitMeta(deviance=dev, rss_log=rss, k=k, converged=True,
                         n_iter=1),
        gender=surface.gender,
        population_id=surface.population_id,
        extra=children,
    )


FUNCTIONAL_MODELS = ("fdm", "robust_fdm", "pr")
