"""Shapley-value weights for combining mortality forecasts.

Each age (optionally each horizon) defines a cooperative game among the
candidate models. A coalition's forecast is the equal-weight average of
its members' log-rate forecasts, exactly how the downstream ensembles
combine on the log scale, and the characteristic function is that
average's reduction in validation mean squared error relative to the
intercept-only predictor; the empty coalition is worth zero. A model's
Shapley value is then its average marginal accuracy contribution over all
coalition orderings, computed exactly from the full 2^N table (N is at
most 15, so 32,768 coalition values per game) or, as a fallback, by
sampling permutations.

A systematically wrong forecast drags down the accuracy of every average
it joins, so its marginal contributions, and with them its value, go
negative. That is the point of scoring a fixed combination rather than a
refitted one: a regression with free coefficients can rescale or flip a
biased forecast into a useful covariate and would credit it anyway.

Per-age values are min-max normalized across models within the age, which
pins the most useful model at 1 and the least useful at 0. Truncation at
a threshold alpha keeps the models whose normalized value exceeds alpha
and renormalizes; the threshold itself is picked by grid search on
validation MSE. An age where every model has the same value normalizes to
all ones, which makes the downstream weights uniform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .data.surface import MortalitySurface
from .models.base import ForecastGrid
from .models.window import ForecastPanel, assemble_panel

__all__ = [
    "DEFAULT_ALPHA_GRID",
    "FINE_ALPHA_GRID",
    "AlphaSelection",
    "CoalitionGame",
    "ShapError",
    "ShapReport",
    "WeightVector",
    "build_game",
    "game_from_panels",
    "mean_normalized_shap",
    "sampled_shapley",
    "select_alpha",
    "shap_report",
    "shap_weights",
    "shapley_values",
]

DEFAULT_ALPHA_GRID = (0.05, 0.10, 0.15, 0.20, 0.50)
FINE_ALPHA_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))


class ShapError(RuntimeError):
    """A coalition game or weight construction could not be completed."""


@dataclass(frozen=True)
class CoalitionGame:
    """Characteristic function of one model-combination game.

    ``value[mask]`` is v(S) for the coalition whose members are the set
    bits of ``mask`` (bit i = ``players[i]``), so ``value`` has length
    2^N and ``value[0]`` = v(empty) = 0.
    """

    players: tuple[str, ...]
    value: np.ndarray
    n_obs: int = 0

    def __post_init__(self):
        v = np.asarray(self.value, dtype=float)
        if v.shape != (1 << len(self.players),):
            raise ShapError(
                f"game over {len(self.players)} players needs "
                f"{1 << len(self.players)} coalition values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapError("coalition values contain NaN or infinity")
        if v[0] != 0.0:
            raise ShapError("the empty coalition must be worth exactly 0")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "value", v)


@dataclass(frozen=True)
class ShapReport:
    """Per-(model, age, horizon) Shapley values plus normalized means.

    ``phi[i, a, h]`` is the value of ``players[i]`` at ``ages[a]`` and
    ``horizons[h]``; ``phi_mean[i, a]`` is the horizon mean min-max
    normalized within the age, so every age column spans [0, 1].
    """

    players: tuple[str, ...]
    ages: np.ndarray
    horizons: np.ndarray
    phi: np.ndarray
    phi_mean: np.ndarray
    gender: str = ""
    population_id: str = ""


@dataclass(frozen=True)
class WeightVector:
    """Truncated simplex weights for one age."""

    weights: Mapping[str, float]
    selected: tuple[str, ...]
    threshold: float

    def as_array(self, players: Sequence[str]) -> np.ndarray:
        return np.array([self.weights[p] for p in players])


@dataclass(frozen=True)
class AlphaSelection:
    """Grid-search result for the truncation threshold at one horizon."""

    alpha: float
    horizon: int
    grid: tuple[float, ...]
    mse: tuple[float, ...]


# ---------------------------------------------------------------------------
# coalition values
# ---------------------------------------------------------------------------

def _coalition_values(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    """v(S) for every coalition, as a 2^N array indexed by bitmask.

    F has one column of log-rate forecasts per player, y the realized log
    rates. Each coalition predicts with the plain average of its members'
    columns, and v(S) is the MSE reduction of that average against the
    best constant predictor (the sample mean of y), so v can go negative
    when a coalition forecasts worse than no model at all. Subset sums
    are built bit by bit: after processing player i, row ``mask`` of the
    table holds the column sum of the members in ``mask``.
    """
    n, N = F.shape
    cols = F.T
    sums = np.zeros((1, n))
    for i in range(N):
        sums = np.concatenate([sums, sums + cols[i]])
    pc, _ = _shapley_kernel(N)
    resid = sums / np.maximum(pc, 1)[:, None] - y[None, :]
    base = float(np.mean((y - y.mean()) ** 2))
    v = base - np.mean(resid * resid, axis=1)
    v[0] = 0.0
    return v


def _panel_matrix(panels: Mapping[str, ForecastPanel], age_pos: int,
                  horizon_pos: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (cells x players) log forecasts and matching truth."""
    ref = next(iter(panels.values()))
    if horizon_pos is None:
        sel = np.s_[age_pos, :, :]
    else:
        sel = np.s_[age_pos, horizon_pos, :]
    truth = ref.truth_log[sel]
    y = truth.ravel()
    F = np.column_stack([p.log_point[sel].ravel() for p in panels.values()])
    keep = np.isfinite(y) & np.all(np.isfinite(F), axis=1)
    if not keep.any():
        raise ShapError("no usable validation cells for this game")
    bad = np.isfinite(y) & ~np.all(np.isfinite(F), axis=1)
    if bad.any():
        raise ShapError(
            "models disagree on which validation cells they forecast")
    return F[keep], y[keep]


def _check_panels(panels: Mapping[str, ForecastPanel]) -> ForecastPanel:
    if not panels:
        raise ShapError("no forecast panels given")
    ref = next(iter(panels.values()))
    for name, p in panels.items():
        if not np.array_equal(p.ages, ref.ages):
            raise ShapError(f"panel {name} is on a different age grid")
        if not np.array_equal(p.origins, ref.origins):
            raise ShapError(f"panel {name} covers different origins")
        if not np.array_equal(p.truth_log, ref.truth_log, equal_nan=True):
            raise ShapError(f"panel {name} was assembled against different "
                            "realized rates")
    return ref


def game_from_panels(panels: Mapping[str, ForecastPanel], age: int,
                     horizon: int | None = None) -> CoalitionGame:
    """Build the combination game at one age from aligned panels.

    ``horizon`` restricts the game to one forecast step; by default every
    (origin, horizon) cell of the window contributes an observation.
    """
    ref = _check_panels(panels)
    age_pos = int(np.flatnonzero(ref.ages == age)[0]) if age in ref.ages \
        else None
    if age_pos is None:
        raise ShapError(f"age {age} not covered by the panels")
    hpos = None
    if horizon is not None:
        if not 1 <= horizon <= ref.horizons.size:
            raise ShapError(f"horizon {horizon} outside the window")
        hpos = horizon - 1
    F, y = _panel_matrix(panels, age_pos, hpos)
    return CoalitionGame(players=tuple(panels), value=_coalition_values(F, y),
                         n_obs=y.size)


def build_game(forecasts: Mapping[str, Sequence[ForecastGrid]],
               truth: MortalitySurface, age: int,
               horizon: int | None = None) -> CoalitionGame:
    """Assemble each model's origin grids against ``truth``, then build the
    game at ``age``. See :func:`game_from_panels` for the panel variant."""
    panels = {m: assemble_panel(list(gs), truth) for m, gs in forecasts.items()}
    return game_from_panels(panels, age, horizon)


# ---------------------------------------------------------------------------
# Shapley values
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _shapley_kernel(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Popcount of every mask and the ordering weight for each prefix size."""
    pc = np.zeros(1, dtype=np.int64)
    for _ in range(n):
        pc = np.concatenate([pc, pc + 1])
    w = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])
    return pc, w


def shapley_values(game: CoalitionGame) -> np.ndarray:
    """Exact Shapley values, aligned with ``game.players``.

    phi_i = sum over coalitions S not containing i of
    |S|!(N-|S|-1)!/N! * [v(S + i) - v(S)]; the values always satisfy
    efficiency, so they sum to v(grand coalition).
    """
    N = len(game.players)
    v = game.value
    pc, w = _shapley_kernel(N)
    masks = np.arange(1 << N, dtype=np.int64)
    phi = np.empty(N)
    for i in range(N):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.dot(w[pc[without]],
                              v[without + (1 << i)] - v[without]))
    return phi


def sampled_shapley(game: CoalitionGame, n_draws: int = 20000,
                    seed=0) -> np.ndarray:
    """Monte Carlo Shapley values from uniformly sampled orderings.

    Only useful beyond the exact engine's practical range or for
    cross-checks; with 20,000 draws the estimates typically sit within a
    couple of hundredths of the exact values.
    """
    if n_draws < 1:
        raise ValueError("need at least one sampled ordering")
    N = len(game.players)
    v = game.value
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.tile(np.arange(N), (n_draws, 1)), axis=1)
    phi = np.zeros(N)
    mask = np.zeros(n_draws, dtype=np.int64)
    for j in range(N):
        pl = perms[:, j]
        nxt = mask | np.left_shift(1, pl)
        np.add.at(phi, pl, v[nxt] - v[mask])
        mask = nxt
    return phi / n_draws


# ---------------------------------------------------------------------------
# reports, weights, threshold search
# ---------------------------------------------------------------------------

def mean_normalized_shap(players: Sequence[str], ages: np.ndarray,
                         horizons: np.ndarray, phi: np.ndarray, *,
                         phi_age: np.ndarray | None = None,
                         gender: str = "", population_id: str = "") -> ShapReport:
    """Min-max normalize per-age mean contributions within each age.

    The per-age summary defaults to the mean of ``phi`` over the horizon
    axis; ``phi_age`` supplies a different (models, ages) aggregate, such
    as the values of the pooled per-age game, without changing how the
    per-horizon breakdown is reported. An age where all models share the
    same mean collapses to ones for everyone, which downstream turns into
    equal weights.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (len(players), len(ages), len(horizons)):
        raise ShapError(f"phi must be (models, ages, horizons), got {phi.shape}")
    means = phi.mean(axis=2) if phi_age is None else np.asarray(phi_age, float)
    if means.shape != (len(players), len(ages)):
        raise ShapError(f"phi_age must be (models, ages), got {means.shape}")
    lo = means.min(axis=0)
    span = means.max(axis=0) - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = (means - lo[None, :]) / span[None, :]
    norm[:, span == 0] = 1.0
    return ShapReport(
        players=tuple(players),
        ages=np.asarray(ages),
        horizons=np.asarray(horizons),
        phi=phi,
        phi_mean=norm,
        gender=gender,
        population_id=population_id,
    )


def shap_report(panels: Mapping[str, ForecastPanel]) -> ShapReport:
    """Play the combination games over aligned panels and summarize.

    The weights-driving summary comes from one pooled game per age, whose
    sample is every (origin, horizon) validation cell at that age; a
    single horizon of a short expanding window leaves very few cells (one,
    at the longest horizon), so per-horizon values are noisy. The
    per-horizon games are still played and reported in ``phi`` as the
    attribution breakdown.
    """
    ref = _check_panels(panels)
    players = tuple(panels)
    A, H = ref.ages.size, ref.horizons.size
    phi = np.empty((len(players), A, H))
    phi_age = np.empty((len(players), A))
    for a in range(A):
        F, y = _panel_matrix(panels, a, None)
        pooled = CoalitionGame(players=players,
                               value=_coalition_values(F, y), n_obs=y.size)
        phi_age[:, a] = shapley_values(pooled)
        for h in range(H):
            F, y = _panel_matrix(panels, a, h)
            game = CoalitionGame(players=players,
                                 value=_coalition_values(F, y), n_obs=y.size)
            phi[:, a, h] = shapley_values(game)
    return mean_normalized_shap(players, ref.ages, ref.horizons, phi,
                                phi_age=phi_age, gender=ref.gender,
                                population_id=ref.population_id)


def shap_weights(report: ShapReport, age: int, threshold: float) -> WeightVector:
    """Truncate at ``threshold`` and renormalize the surviving values.

    Keeps the models with normalized value strictly above the threshold;
    their weights are proportional to those values. threshold = 0 keeps
    every model with positive value.
    """
    if threshold < 0:
        raise ValueError("truncation threshold must be nonnegative")
    pos = np.flatnonzero(report.ages == age)
    if pos.size == 0:
        raise ShapError(f"age {age} not covered by the report")
    phit = report.phi_mean[:, int(pos[0])]
    keep = phit > threshold
    if not keep.any():
        raise ShapError(
            f"threshold {threshold} removes all models at age {age}")
    w = np.where(keep, phit, 0.0)
    w = w / w.sum()
    return WeightVector(
        weights={p: float(w[i]) for i, p in enumerate(report.players)},
        selected=tuple(p for p, k in zip(report.players, keep) if k),
        threshold=float(threshold),
    )


def select_alpha(report: ShapReport, panels: Mapping[str, ForecastPanel],
                 horizon: int,
                 grid: Sequence[float] = DEFAULT_ALPHA_GRID) -> AlphaSelection:
    """Pick the truncation threshold by validation MSE at one horizon.

    Every candidate builds per-age truncated weights from the report,
    combines the panels' log forecasts, and scores them against the
    realized log rates at that horizon. Ties go to the smallest threshold,
    which keeps more models in play.
    """
    cand = sorted(set(float(a) for a in grid))
    if not cand:
        raise ValueError("empty threshold grid")
    if cand[0] < 0 or cand[-1] >= 1:
        raise ValueError("thresholds must lie in [0, 1)")
    ref = _check_panels(panels)
    if not np.array_equal(ref.ages, report.ages):
        raise ShapError("report and panels are on different age grids")
    if not 1 <= horizon <= ref.horizons.size:
        raise ShapError(f"horizon {horizon} outside the window")
    logF = np.stack([panels[p].log_point[:, horizon - 1, :]
                     for p in report.players])
    truth = ref.truth_log[:, horizon - 1, :]
    keep = np.isfinite(truth)
    mses = []
    for alpha in cand:
        sel = report.phi_mean > alpha
        empty = ~sel.any(axis=0)
        if empty.any():
            first = int(report.ages[np.flatnonzero(empty)[0]])
            raise ShapError(
                f"threshold {alpha} removes all models at age {first}")
        w = np.where(sel, report.phi_mean, 0.0)
        w = w / w.sum(axis=0, keepdims=True)
        ens = np.einsum("na,nak->ak", w, logF)
        mses.append(float(np.mean((ens - truth)[keep] ** 2)))
    best = int(np.argmin(mses))
    return AlphaSelection(alpha=cand[best], horizon=int(horizon),
                          grid=tuple(cand), mse=tuple(mses))
