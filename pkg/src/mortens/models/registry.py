"""Single entry point for fitting any of the fifteen models."""
from __future__ import annotations

from ..data.surface import MortalitySurface
from .base import MODEL_IDS, FitError, ModelFit
from .dynamics import fit_dynamics
from .functional import fit_fdm, fit_pr
from .poisson import POISSON_MODELS
from .svd import SVD_MODELS, fit_svd

__all__ = ["fit"]


def fit(model: str, train: MortalitySurface, *,
        companion: MortalitySurface | None = None,
        n_components: int = 6) -> ModelFit:
    """Fit a model to a training surface and attach factor dynamics.

    Twenty or more training years are recommended (the factor time-series
    models need history); three is the hard floor. Non-convergence of the
    likelihood models is reported through ``fit_meta.converged``, not
    raised. ``companion`` is the opposite gender's surface and is required
    by (and only used for) the product-ratio model.
    """
    if model not in MODEL_IDS:
        raise ValueError(f"unknown model {model!r}; expected one of {', '.join(MODEL_IDS)}")
    if train.n_years < 3:
        raise FitError(f"{model}: need at least 3 training years, got {train.n_years}")
    if model in POISSON_MODELS:
        f = POISSON_MODELS[model](train)
    elif model in SVD_MODELS:
        f = fit_svd(model, train)
    elif model in ("fdm", "robust_fdm"):
        f = fit_fdm(model, train, n_components)
    else:
        f = fit_pr(train, companion, n_components)
    return fit_dynamics(f)
