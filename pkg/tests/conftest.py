"""Shared fixtures.

Model fitting dominates the suite's runtime, so every fitted object lives
in a session-scoped fixture and the worlds are deliberately tiny (a dozen
ages, a few decades). Tests that only need arrays build them inline.
"""
from __future__ import annotations

import numpy as np
import pytest

from mortens import (
    SplitConfig,
    assemble_panel,
    expanding_window_run,
    split,
    synthesize_surface,
)

# A noiseless rank-1 world. Rank-1 models reproduce it almost exactly,
# which gives clean oracles for deviance, forecasts, and coalition games.
LC_SPEC = {
    "generator": "lc_rank1",
    "age_min": 0,
    "age_max": 12,
    "year_min": 1970,
    "n_years": 40,
}

LC_SPLIT = SplitConfig(train=(1970, 1994), validation=(1995, 1999),
                       test=(2000, 2009))

# Models used for the shared panels: cheap to fit and structurally varied
# (one rank-1, one CBD-family, one cohort, one SVD, one functional).
PANEL_MODELS = ("lc", "cbd", "apc", "lca_dt", "fdm")


@pytest.fixture(scope="session")
def lc_surface():
    return synthesize_surface(LC_SPEC, seed=3)


@pytest.fixture(scope="session")
def lc_parts(lc_surface):
    """(train, validation, test) surfaces of the rank-1 world."""
    return split(lc_surface, LC_SPLIT)


@pytest.fixture(scope="session")
def plateau_surface():
    spec = {
        "generator": "noisy_plateau",
        "age_min": 0,
        "age_max": 30,
        "year_min": 1960,
        "n_years": 50,
    }
    return synthesize_surface(spec, seed=5)


@pytest.fixture(scope="session")
def val_panels(lc_surface):
    """Validation-phase point panels for PANEL_MODELS on the rank-1 world."""
    out = {}
    for m in PANEL_MODELS:
        grids = expanding_window_run(m, lc_surface, LC_SPLIT, "validation")
        out[m] = assemble_panel(grids, lc_surface)
    return out


@pytest.fixture(scope="session")
def test_panels(lc_surface):
    """Test-phase panels with simulated intervals (small path count)."""
    out = {}
    for m in PANEL_MODELS:
        grids = expanding_window_run(m, lc_surface, LC_SPLIT, "test",
                                     n_paths=100, seed=11)
        out[m] = assemble_panel(grids, lc_surface)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)
