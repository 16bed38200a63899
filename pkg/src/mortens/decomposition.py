"""Bias-variance-noise decomposition of ensemble forecast MSE.

Over replicated forecasts (synthetic regeneration, or a bootstrap over
origins) the squared error of a weighted combination against a noisy
outcome splits into three parts:

    MSE = Bias^2 + Var + sigma^2

where Bias is the gap between the mean combined forecast and the
noiseless target, Var the replication variance of the combined forecast
(which carries every member variance and pairwise covariance term), and
sigma^2 the irreducible outcome noise. The identity is exact when the
noise realizations are uncorrelated with the member forecasts; on real
data sigma^2 is not identifiable and is reported as the residual.

For a weight vector w and the member second-moment matrix Sigma_f, the
conditional MSE is minimized by the regression solution w*, and

    MSE(w) = sigma^2 + (w - w*)' Sigma_f (w - w*)

whenever the members can reproduce the target at w*. Estimated weights
add two terms on top of the fixed-weight decomposition: a weight-bias
quadratic form and the estimation variance tr(Sigma_f Var(w_hat)).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapley import WeightVector

__all__ = [
    "DecompositionReport",
    "mse_decomposition",
    "optimal_weights",
    "quadratic_gap",
]


@dataclass(frozen=True)
class DecompositionReport:
    """Decomposed ensemble MSE plus optional weight-estimation terms.

    ``mse`` is the empirical squared error against the observed outcomes
    when those were given, otherwise the reconstructed bias_sq + variance
    + noise. ``weight_gap`` is w - w* against the empirical regression
    solution; ``est_variance`` and ``weight_bias_sq`` appear only when
    replicated weight estimates were supplied.
    """

    bias_sq: float
    variance: float
    noise: float
    mse: float
    w_star: np.ndarray | None = None
    weight_gap: np.ndarray | None = None
    est_variance: float | None = None
    weight_bias_sq: float | None = None


def _as_member_cube(members) -> np.ndarray:
    m = np.asarray(members, dtype=float)
    if m.ndim == 2:
        m = m[:, :, None]
    if m.ndim != 3:
        raise ValueError("members must be (models, replications[, cells])")
    return m


def optimal_weights(members, outcomes) -> np.ndarray:
    """Regression solution w* = argmin_w E (w'm - y)^2 over replications.

    ``members`` is (models, replications[, cells]), ``outcomes`` broadcasts
    against the replication/cell axes. Solved by least squares, so
    duplicated members yield the minimum-norm optimum.
    """
    m = _as_member_cube(members)
    N, R, C = m.shape
    out = np.asarray(outcomes, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    y = np.broadcast_to(out, (R, C))
    X = m.reshape(N, R * C).T
    w, *_ = np.linalg.lstsq(X, y.ravel(), rcond=None)
    return w


def quadratic_gap(weights, second_moment, w_star) -> float:
    """(w - w*)' Sigma_f (w - w*), the conditional MSE excess of w."""
    d = np.asarray(weights, dtype=float) - np.asarray(w_star, dtype=float)
    return float(d @ np.asarray(second_moment, dtype=float) @ d)


def mse_decomposition(weights, members, target, *, observed=None,
                      noise_var: float | None = None,
                      weight_samples=None) -> DecompositionReport:
    """Decompose the MSE of a fixed-weight combination over replications.

    Parameters
    ----------
    weights : array of member weights, aligned with ``members`` axis 0
        (pass ``WeightVector.as_array(players)`` for a weight vector).
    members : (models, replications[, cells]) replicated forecasts.
    target : noiseless signal, broadcast over cells.
    observed : optional (replications[, cells]) noisy outcomes; when given
        the report's ``mse`` is the empirical error against them and, if
        ``noise_var`` is not supplied, the noise term is their mean squared
        gap from the target.
    noise_var : known irreducible variance; overrides the estimate.
    weight_samples : optional (draws, models) replicated weight estimates,
        adding the estimation-variance and weight-bias terms.
    """
    if isinstance(weights, WeightVector):
        raise TypeError(
            "pass WeightVector.as_array(players) so member order is explicit")
    m = _as_member_cube(members)
    N, R, C = m.shape
    if R < 2:
        raise ValueError(f"need at least 2 replications, got {R}")
    w = np.asarray(weights, dtype=float)
    if w.shape != (N,):
        raise ValueError(f"weights must have shape ({N},), got {w.shape}")
    t = np.broadcast_to(np.asarray(target, dtype=float), (C,))

    combined = np.einsum("n,nrc->rc", w, m)
    center = combined.mean(axis=0)
    bias_sq = float(np.mean((center - t) ** 2))
    variance = float(np.mean((combined - center[None, :]) ** 2))

    if observed is not None:
        obs = np.asarray(observed, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        y = np.broadcast_to(obs, (R, C))
        mse = float(np.mean((combined - y) ** 2))
        noise = noise_var if noise_var is not None \
            else float(np.mean((y - t[None, :]) ** 2))
    else:
        y = np.broadcast_to(t, (R, C))
        noise = noise_var if noise_var is not None else 0.0
        mse = bias_sq + variance + noise

    w_star = optimal_weights(m, y)
    X = m.reshape(N, R * C)
    second = X @ X.T / (R * C)

    est_variance = None
    weight_bias_sq = None
    if weight_samples is not None:
        ws = np.asarray(weight_samples, dtype=float)
        if ws.ndim != 2 or ws.shape[1] != N:
            raise ValueError(f"weight samples must be (draws, {N})")
        if ws.shape[0] < 2:
            raise ValueError("need at least 2 weight draws")
        dev = ws - ws.mean(axis=0)
        var_w = dev.T @ dev / ws.shape[0]
        est_variance = float(np.trace(second @ var_w))
        weight_bias_sq = quadratic_gap(ws.mean(axis=0), second, w_star)

    return DecompositionReport(
        bias_sq=bias_sq,
        variance=variance,
        noise=float(noise),
        mse=mse,
        w_star=w_star,
        weight_gap=w - w_star,
        est_variance=est_variance,
        weight_bias_sq=weight_bias_sq,
    )
