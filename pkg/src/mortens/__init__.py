"""Forecast combination for age-specific mortality.

Fifteen stochastic mortality models are fitted to an age-by-year surface,
forecast over expanding windows, and combined. Point combinations weight
the models by their Shapley attribution to validation accuracy (optionally
truncated at a threshold); interval combinations average or trim the
members' simulated bounds. Scoring covers MSE/MAE by horizon, interval
scores, Diebold-Mariano comparisons, age-group breakdowns, and a
bias-variance-noise decomposition of ensemble error.
"""

from mortens.data import (
    MortalitySurface,
    SplitConfig,
    SurfaceError,
    life_table,
    load_surface,
    split,
    synthesize_surface,
)
from mortens.models import MODEL_IDS, FitError, fit, forecast_point, simulate_intervals
from mortens.models.window import ForecastPanel, assemble_panel, expanding_window_run
from mortens.shapley import (
    DEFAULT_ALPHA_GRID,
    FINE_ALPHA_GRID,
    CoalitionGame,
    ShapError,
    ShapReport,
    WeightVector,
    select_alpha,
    shap_report,
    shap_weights,
    shapley_values,
)
from mortens.ensembles import (
    EnsembleError,
    IntervalEnsembleSpec,
    PointEnsembleSpec,
    aic_weights,
    combine_interval,
    combine_panel_intervals,
    combine_panel_points,
    combine_point,
    mse_weights,
    sma_weights,
)
from mortens.evaluation import (
    EvalError,
    age_stratified_mse,
    dm_test,
    interval_score,
    mean_interval_score,
    point_scores,
    selection_frequency,
)
from mortens.decomposition import (
    DecompositionReport,
    mse_decomposition,
    optimal_weights,
    quadratic_gap,
)

__version__ = "0.1.0"

__all__ = [
    "MortalitySurface", "SplitConfig", "SurfaceError", "life_table",
    "load_surface", "split", "synthesize_surface",
    "MODEL_IDS", "FitError", "fit", "forecast_point", "simulate_intervals",
    "ForecastPanel", "assemble_panel", "expanding_window_run",
    "DEFAULT_ALPHA_GRID", "FINE_ALPHA_GRID", "CoalitionGame", "ShapError",
    "ShapReport", "WeightVector", "select_alpha", "shap_report",
    "shap_weights", "shapley_values",
    "EnsembleError", "IntervalEnsembleSpec", "PointEnsembleSpec",
    "aic_weights", "combine_interval", "combine_panel_intervals",
    "combine_panel_points", "combine_point", "mse_weights", "sma_weights",
    "EvalError", "age_stratified_mse", "dm_test", "interval_score",
    "mean_interval_score", "point_scores", "selection_frequency",
    "DecompositionReport", "mse_decomposition", "optimal_weights",
    "quadratic_gap",
    "__version__",
]
