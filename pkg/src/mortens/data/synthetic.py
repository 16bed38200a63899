"""Seeded synthetic mortality surfaces for tests and demos.

Three generator families are provided:

``lc_rank1``
    ln m_{x,t} = alpha_x + beta_x * kappa_t, a surface that a single-factor
    log-bilinear model can recover exactly. With ``noise="none"`` the rates
    are the exact exponential of that predictor.
``apc_cohort``
    The lc_rank1 predictor plus an additive cohort curve gamma_{t-x}. With
    ``gamma_amplitude`` 0 the output is bit-identical to lc_rank1 under the
    same remaining parameters.
``noisy_plateau``
    A three-regime schedule (child mortality decline, young-adult accident
    hump, senescent increase that saturates at an old-age plateau) with
    regime-specific annual improvement rates. Defaults to Poisson death
    noise.

Every stochastic ingredient draws from its own ``default_rng([seed, k])``
stream, so adding or removing one ingredient (a cohort curve, death noise)
never shifts the draws of the others. Scalar parameters may be given either
as a fixed number or as a ``(low, high)`` range to be drawn uniformly from
the seed.
"""
from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from .surface import MortalitySurface, SurfaceError, repair_rates

__all__ = ["synthesize_surface", "GENERATORS"]

# independent substream per stochastic ingredient
_BLOCK_PARAMS = 0
_BLOCK_ALPHA = 1
_BLOCK_BETA = 2
_BLOCK_KAPPA = 3
_BLOCK_GAMMA = 4
_BLOCK_NOISE = 5

_COMMON_DEFAULTS: dict[str, Any] = {
    "age_min": 0,
    "age_max": 100,
    "year_min": 1960,
    "n_years": 60,
    "exposure_level": 1e5,
    "gender": "F",
    "noise": None,  # per-generator default filled in below
}

# ordered: parameters shared with lc_rank1 come first so that specifying
# extra cohort parameters never shifts the shared draws
_GEN_DEFAULTS: dict[str, dict[str, Any]] = {
    "lc_rank1": {
        "alpha_jitter": 0.05,
        "kappa_drift": (-2.0, -1.0),
        "kappa_sigma": 0.15,
    },
    "apc_cohort": {
        "alpha_jitter": 0.05,
        "kappa_drift": (-2.0, -1.0),
        "kappa_sigma": 0.15,
        "gamma_amplitude": (0.05, 0.2),
        "gamma_wavelength": 25.0,
    },
    "noisy_plateau": {
        "child_level": (0.008, 0.03),
        "child_decay": (0.9, 1.4),
        "hump_height": (2e-4, 8e-4),
        "hump_age": 20.0,
        "hump_width": (4.0, 8.0),
        "gompertz_a": (2e-5, 6e-5),
        "gompertz_b": (0.085, 0.105),
        "plateau": (0.5, 0.9),
        "improve_child": (0.015, 0.03),
        "improve_hump": (0.005, 0.015),
        "improve_old": (0.008, 0.02),
    },
}

_NOISE_DEFAULT = {"lc_rank1": "none", "apc_cohort": "none", "noisy_plateau": "poisson"}


def _resolve(params: dict[str, Any], rng: np.random.Generator) -> dict[str, float]:
    """Draw every ranged parameter; pass scalars through unchanged."""
    out = {}
    for key, val in params.items():
        if isinstance(val, (tuple, list)) and len(val) == 2:
            lo, hi = float(val[0]), float(val[1])
            out[key] = float(rng.uniform(lo, hi))
        else:
            out[key] = val
    return out


def _grid(p: Mapping[str, Any]) -> tuple[np.ndarray, np.ndarray]:
    ages = np.arange(int(p["age_min"]), int(p["age_max"]) + 1)
    y0 = int(p["year_min"])
    years = np.arange(y0, y0 + int(p["n_years"]))
    return ages, years


def _exposures(ages: np.ndarray, level: float) -> np.ndarray:
    # flat through midlife, thinning out about 8% per year past 60
    shape = np.where(ages <= 60, 1.0, np.exp(-0.08 * (ages - 60.0)))
    return level * shape


def _baseline_alpha(ages: np.ndarray) -> np.ndarray:
    """A plausible all-age log-rate schedule used as the lc_rank1 level."""
    x = ages.astype(float)
    child = 0.012 * np.exp(-1.1 * x)
    hump = 4e-4 * np.exp(-((x - 20.0) ** 2) / (2 * 6.0**2))
    old = 4e-5 * np.exp(0.095 * x)
    return np.log(child + hump + old + 1e-5)


def _log_lc(p, seed: int, ages: np.ndarray, years: np.ndarray) -> np.ndarray:
    A, T = ages.size, years.size
    r_alpha = np.random.default_rng([seed, _BLOCK_ALPHA])
    r_beta = np.random.default_rng([seed, _BLOCK_BETA])
    r_kappa = np.random.default_rng([seed, _BLOCK_KAPPA])

    alpha = _baseline_alpha(ages) + p["alpha_jitter"] * r_alpha.standard_normal(A)
    w = 0.5 + r_beta.random(A)
    beta = w / w.sum()
    steps = p["kappa_drift"] + p["kappa_sigma"] * abs(
        p["kappa_drift"]
    ) * r_kappa.standard_normal(T)
    kappa = np.concatenate([[0.0], np.cumsum(steps[:-1])])
    return alpha[:, None] + beta[:, None] * kappa[None, :]


def _gen_lc_rank1(p, seed, ages, years):
    return _log_lc(p, seed, ages, years)


def _gen_apc_cohort(p, seed, ages, years):
    log_m = _log_lc(p, seed, ages, years)
    A, T = ages.size, years.size
    n_cohorts = A + T - 1
    r_gamma = np.random.default_rng([seed, _BLOCK_GAMMA])
    idx = np.arange(n_cohorts, dtype=float)
    raw = np.sin(2 * np.pi * idx / p["gamma_wavelength"]) + 0.5 * r_gamma.standard_normal(
        n_cohorts
    )
    gamma = p["gamma_amplitude"] * (raw - raw.mean())
    # cohort index of cell (x, t) relative to the oldest cohort on the grid
    ci = (years[None, :] - years[0]) - (ages[:, None] - ages[0]) + (A - 1)
    return log_m + gamma[ci]


def _gen_noisy_plateau(p, seed, ages, years):
    x = ages.astype(float)[:, None]
    dt = (years - years[0]).astype(float)[None, :]
    child = p["child_level"] * np.exp(-p["child_decay"] * x) * np.exp(
        -p["improve_child"] * dt
    )
    hump = p["hump_height"] * np.exp(
        -((x - p["hump_age"]) ** 2) / (2 * p["hump_width"] ** 2)
    ) * np.exp(-p["improve_hump"] * dt)
    g = p["gompertz_a"] * np.exp(-p["improve_old"] * dt) * np.exp(p["gompertz_b"] * x)
    senescent = g / (1.0 + g / p["plateau"])  # saturates at the plateau level
    return np.log(child + hump + senescent + 1e-6)


GENERATORS = {
    "lc_rank1": _gen_lc_rank1,
    "apc_cohort": _gen_apc_cohort,
    "noisy_plateau": _gen_noisy_plateau,
}


def synthesize_surface(spec: str | Mapping[str, Any], seed: int) -> MortalitySurface:
    """Generate a deterministic synthetic surface.

    Parameters
    ----------
    spec : str or mapping
        Either a generator name or a mapping with a ``"generator"`` key and
        parameter overrides. Scalar parameters accept a number or a
        ``(low, high)`` range drawn uniformly from the seed. Common keys:
        ``age_min``, ``age_max``, ``year_min``, ``n_years``,
        ``exposure_level``, ``gender``, ``noise`` ("none" or "poisson").
    seed : int
        Seeds every stochastic ingredient. The same (spec, seed) pair always
        produces a bit-identical surface.

    Raises
    ------
    SurfaceError
        Unknown generator name or parameter key.
    """
    if isinstance(spec, str):
        spec = {"generator": spec}
    spec = dict(spec)
    try:
        name = spec.pop("generator")
    except KeyError:
        raise SurfaceError("generator spec needs a 'generator' key") from None
    if name not in GENERATORS:
        known = ", ".join(sorted(GENERATORS))
        raise SurfaceError(f"unknown generator {name!r}; expected one of {known}")

    params = dict(_COMMON_DEFAULTS)
    params["noise"] = _NOISE_DEFAULT[name]
    params.update(_GEN_DEFAULTS[name])
    unknown = set(spec) - set(params)
    if unknown:
        raise SurfaceError(
            f"unknown parameter(s) for {name}: {', '.join(sorted(unknown))}"
        )
    params.update(spec)
    params = _resolve(params, np.random.default_rng([seed, _BLOCK_PARAMS]))

    ages, years = _grid(params)
    if ages.size < 2 or years.size < 2:
        raise SurfaceError("surface needs at least 2 ages and 2 years")
    log_m = GENERATORS[name](params, seed, ages, years)
    rates = np.exp(log_m)
    exposures = np.broadcast_to(
        _exposures(ages, float(params["exposure_level"]))[:, None], rates.shape
    ).copy()

    noise = params["noise"]
    if noise == "poisson":
        r_noise = np.random.default_rng([seed, _BLOCK_NOISE])
        deaths = r_noise.poisson(rates * exposures).astype(float)
        rates, deaths = repair_rates(deaths / exposures, exposures, deaths)
    elif noise == "none":
        deaths = rates * exposures
    else:
        raise SurfaceError(f"unknown noise kind {noise!r}; expected 'none' or 'poisson'")

    return MortalitySurface(
        ages=ages,
        years=years,
        rates=rates,
        deaths=deaths,
        exposures=exposures,
        gender=str(params["gender"]),
        population_id=f"{name}-{seed}",
    )
