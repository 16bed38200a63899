"""The fifteen stochastic mortality models and their forecasting machinery."""
from .base import (
    MODEL_IDS,
    FactorDynamics,
    FitError,
    FitMeta,
    ForecastGrid,
    Fpca,
    ModelFit,
    fit_from_json,
    fit_to_json,
    log_fitted,
)
from .dynamics import fit_dynamics, forecast_point, simulate_intervals
from .registry import fit
from .window import ForecastPanel, assemble_panel, expanding_window_run

__all__ = [
    "MODEL_IDS",
    "FactorDynamics",
    "FitError",
    "FitMeta",
    "ForecastGrid",
    "ForecastPanel",
    "Fpca",
    "ModelFit",
    "assemble_panel",
    "expanding_window_run",
    "fit",
    "fit_dynamics",
    "fit_from_json",
    "fit_to_json",
    "forecast_point",
    "log_fitted",
    "simulate_intervals",
]
