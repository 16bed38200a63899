"""Expanding-window backtesting and aligned forecast panels.

Over a W-year evaluation window (validation or test), the first origin is
the year before the window: the model is fitted on everything up to and
including that year and forecasts horizons 1..W. Each later origin extends
the fitting data by one year and forecasts one horizon fewer, so the run
emits exactly W one-step forecasts, W-1 two-step forecasts, down to a single
W-step forecast.

A :class:`ForecastPanel` stacks one model's grids into aligned (age,
horizon, origin) cubes padded with NaN where an origin's window is shorter,
alongside the realized log rates, which is the shape every downstream
consumer (scoring, coalition games, ensembles) works on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data.surface import MortalitySurface, SplitConfig
from .base import MODEL_IDS, FitError, ForecastGrid
from .dynamics import forecast_point, simulate_intervals
from .registry import fit

__all__ = ["expanding_window_run", "ForecastPanel", "assemble_panel"]


def expanding_window_run(
    model: str,
    surface: MortalitySurface,
    cfg: SplitConfig,
    phase: str,
    *,
    companion: MortalitySurface | None = None,
    with_intervals: bool | None = None,
    n_paths: int = 1000,
    level: float = 0.8,
    seed: int = 0,
    n_components: int = 6,
) -> list[ForecastGrid]:
    """Refit at every origin of the chosen phase window and forecast.

    Intervals are simulated when ``with_intervals`` is True (default: only
    in the test phase). Each origin draws from an independent stream seeded
    by (seed, model index, origin year), so results do not depend on the
    order in which origins, models, or populations are processed. Fit
    failures are re-raised tagged with the origin year.
    """
    if phase not in ("validation", "test"):
        raise ValueError(f"phase must be 'validation' or 'test', not {phase!r}")
    window = cfg.validation if phase == "validation" else cfg.test
    if with_intervals is None:
        with_intervals = phase == "test"
    first, last = window
    W = last - first + 1
    model_idx = MODEL_IDS.index(model)
    grids = []
    for k in range(W):
        origin = first - 1 + k
        train = surface.subset_years(cfg.train[0], origin)
        comp = None
        if companion is not None:
            comp = companion.subset_years(cfg.train[0], origin)
        try:
            f = fit(model, train, companion=comp,
                    n_components=n_components)
        except FitError:
            raise
        except Exception as exc:
            raise FitError(f"{model} at origin {origin}: {exc}") from exc
        H = W - k
        if with_intervals:
            grids.append(simulate_intervals(
                f, H, level=level, n_paths=n_paths,
                seed=[int(seed), model_idx, origin]))
        else:
            grids.append(forecast_point(f, H))
    return grids


@dataclass(frozen=True)
class ForecastPanel:
    """One model's expanding-window output on aligned (A, H, W) cubes.

    ``point[a, h-1, k]`` is the forecast of age ``ages[a]`` made at origin
    ``origins[k]`` for horizon h; cells with h > W - k are NaN. ``truth_log``
    holds the realized log rates on the same layout.
    """

    model: str
    gender: str
    population_id: str
    ages: np.ndarray
    horizons: np.ndarray
    origins: np.ndarray
    point: np.ndarray
    truth_log: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    level: float | None = None

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.point)

    @property
    def log_point(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.log(self.point)


def assemble_panel(grids: list[ForecastGrid],
                   surface: MortalitySurface) -> ForecastPanel:
    """Stack one model's origin grids into a panel, aligned with truth.

    ``surface`` must cover the forecast target years; realized values beyond
    its last year are left NaN.
    """
    if not grids:
        raise ValueError("no forecast grids to assemble")
    grids = sorted(grids, key=lambda g: g.origin_year)
    g0 = grids[0]
    A = g0.ages.size
    W = len(grids)
    H = max(g.horizons.size for g in grids)
    point = np.full((A, H, W), np.nan)
    has_iv = all(g.lower is not None for g in grids)
    lower = np.full((A, H, W), np.nan) if has_iv else None
    upper = np.full((A, H, W), np.nan) if has_iv else None
    truth = np.full((A, H, W), np.nan)
    origins = np.array([g.origin_year for g in grids])
    year_pos = {int(y): j for j, y in enumerate(surface.years)}
    for k, g in enumerate(grids):
        if g.model != g0.model or not np.array_equal(g.ages, g0.ages):
            raise ValueError("grids mix models or age grids")
        hk = g.horizons.size
        point[:, :hk, k] = g.point
        if has_iv:
            lower[:, :hk, k] = g.lower
            upper[:, :hk, k] = g.upper
        for j, h in enumerate(g.horizons):
            col = year_pos.get(int(g.origin_year + h))
            if col is not None:
                truth[:, j, k] = surface.log_rates[:, col]
    return ForecastPanel(
        model=g0.model,
        gender=g0.gender,
        population_id=g0.population_id,
        ages=g0.ages.copy(),
        horizons=np.arange(1, H + 1),
        origins=origins,
        point=point,
        truth_log=truth,
        lower=lower,
        upper=upper,
        level=g0.level,
    )
