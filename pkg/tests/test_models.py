"""Model fitting, factor dynamics, forecasting, and the backtest runner."""
from __future__ import annotations

import numpy as np
import pytest

from mortens import (
    MODEL_IDS,
    assemble_panel,
    expanding_window_run,
    fit,
    forecast_point,
    simulate_intervals,
    synthesize_surface,
)
from mortens.data.surface import MortalitySurface, SurfaceError
from mortens.models.base import (
    FactorDynamics,
    FitError,
    FitMeta,
    ModelFit,
    fit_from_json,
    fit_to_json,
    log_fitted,
)
from tests.conftest import LC_SPLIT

POISSON_MODELS = ("lc", "rh", "apc", "cbd", "m6", "m7", "m8", "plat")
SVD_MODELS = ("lca_dt", "lca_dxt", "lca_e0", "lca_none")


def companion_for(surface):
    spec = {"generator": "noisy_plateau", "age_min": int(surface.ages[0]),
            "age_max": int(surface.ages[-1]),
            "year_min": int(surface.years[0]),
            "n_years": surface.n_years, "gender": "M"}
    return synthesize_surface(spec, seed=99)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

class TestFitBasics:
    def test_unknown_model(self, lc_parts):
        with pytest.raises(ValueError, match="unknown model 'gompertz'"):
            fit("gompertz", lc_parts[0])

    def test_too_few_years(self, lc_parts):
        tiny = lc_parts[0].subset_years(1970, 1971)
        with pytest.raises(FitError, match="at least 3 training years, got 2"):
            fit("lc", tiny)

    def test_poisson_models_need_counts(self):
        rng = np.random.default_rng(0)
        s = MortalitySurface(ages=np.arange(5), years=np.arange(2000, 2010),
                             rates=np.exp(rng.normal(-4, 0.2, (5, 10))))
        with pytest.raises(SurfaceError, match="requires"):
            fit("lc", s)

    def test_functional_models_run_on_rates_only(self):
        rng = np.random.default_rng(0)
        s = MortalitySurface(ages=np.arange(8), years=np.arange(2000, 2015),
                             rates=np.exp(rng.normal(-4, 0.2, (8, 15))))
        f = fit("fdm", s)
        assert f.fit_meta.converged
        assert f.fit_meta.deviance is None   # no counts, no deviance

    def test_lc_nails_noiseless_rank1(self, lc_parts):
        f = fit("lc", lc_parts[0])
        assert f.fit_meta.converged
        assert f.fit_meta.deviance < 1e-6
        np.testing.assert_allclose(log_fitted(f), lc_parts[0].log_rates,
                                   atol=1e-5)

    def test_lc_identification(self, lc_parts):
        f = fit("lc", lc_parts[0])
        assert abs(f.kappa[0].sum()) < 1e-8
        assert abs(f.beta[0].sum() - 1.0) < 1e-8


@pytest.mark.parametrize("model", POISSON_MODELS + SVD_MODELS)
def test_constraints_hold_on_plateau_world(plateau_surface, model):
    """Every identifiability constraint is enforced, not just reported."""
    f = fit(model, plateau_surface.subset_years(1960, 1995))
    if not f.fit_meta.converged:
        pytest.skip(f"{model} did not converge on this window")
    worst = max(abs(v) for v in f.constraint_residuals.values())
    assert worst <= 1e-8, f.constraint_residuals


def test_fdm_basis_orthonormal(plateau_surface):
    f = fit("fdm", plateau_surface)
    assert f.constraint_residuals["basis_orthonormality"] <= 1e-8
    B = f.fpca.basis
    np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)


def test_cbd_matches_per_year_regression():
    # a surface whose log rates are exactly linear in age admits a perfect
    # fit, where the Poisson solution and the year-by-year least squares
    # line coincide; the latter is trivial to compute independently
    ages = np.arange(60, 70)
    years = np.arange(2000, 2012)
    a_t = -4.0 + 0.01 * np.arange(years.size)
    b_t = 0.09 + 0.001 * np.arange(years.size)
    xbar = ages.mean()
    log_m = a_t[None, :] + b_t[None, :] * (ages[:, None] - xbar)
    rates = np.exp(log_m)
    e = np.full(rates.shape, 1e5)
    s = MortalitySurface(ages=ages, years=years, rates=rates,
                         deaths=rates * e, exposures=e)
    f = fit("cbd", s)
    x = ages - xbar
    X = np.column_stack([np.ones(ages.size), x])
    for j in range(years.size):
        coef, *_ = np.linalg.lstsq(X, log_m[:, j], rcond=None)
        assert abs(f.kappa[0][j] - coef[0]) < 1e-8
        assert abs(f.kappa[1][j] - coef[1]) < 1e-8


def test_gauge_rescaling_leaves_fit_unchanged(lc_parts):
    f = fit("lc", lc_parts[0])
    c = 3.7
    g = f.with_factors(beta=(f.beta[0] / c,), kappa=(f.kappa[0] * c,))
    np.testing.assert_allclose(log_fitted(g), log_fitted(f), atol=1e-10)


def test_m6_is_m7_with_zero_quadratic_factor(plateau_surface):
    f = fit("m6", plateau_surface.subset_years(1960, 1995))
    x = f.ages.astype(float)
    xbar = x.mean()
    quad = (x - xbar) ** 2 - ((x - xbar) ** 2).mean()
    g = f.with_factors(beta=f.beta + (quad,),
                       kappa=f.kappa + (np.zeros(f.years.size),))
    np.testing.assert_array_equal(log_fitted(g), log_fitted(f))


def test_rh_reports_stall_honestly():
    spec = {"generator": "noisy_plateau", "age_min": 0, "age_max": 15,
            "year_min": 1970, "n_years": 22, "noise": "poisson",
            "exposure_level": 2e3}
    s = synthesize_surface(spec, seed=1)
    f = fit("rh", s)
    assert not f.fit_meta.converged
    assert f.fit_meta.n_iter == 500
    assert "deviance still moving" in f.fit_meta.message
    # the parameters are still usable and satisfy the constraints
    assert max(abs(v) for v in f.constraint_residuals.values()) <= 1e-8


# ---------------------------------------------------------------------------
# dynamics and point forecasts
# ---------------------------------------------------------------------------

def one_factor_fit(kappa, alpha=None, beta=None, ages=None):
    kappa = np.asarray(kappa, dtype=float)
    if ages is None:
        ages = np.arange(60, 63)
    A = len(ages)
    if alpha is None:
        alpha = np.zeros(A)
    if beta is None:
        beta = np.ones(A)
    from mortens.models.dynamics import fit_dynamics
    f = ModelFit(model="lc", ages=np.asarray(ages), years=np.arange(2000, 2000 + kappa.size),
                 alpha_x=np.asarray(alpha, dtype=float),
                 beta=(np.asarray(beta, dtype=float),), kappa=(kappa,),
                 fit_meta=FitMeta(None, 0.0, 1, True, 1))
    return fit_dynamics(f)


class TestRandomWalkForecasts:
    def test_unit_drift_extrapolates(self):
        # kappa 1..5 has drift exactly 1, so three steps ahead sits at 8
        f = one_factor_fit([1.0, 2.0, 3.0, 4.0, 5.0])
        g = forecast_point(f, 3)
        np.testing.assert_allclose(np.log(g.point[:, 2]), 8.0, atol=1e-12)
        assert g.origin_year == 2004
        assert list(g.horizons) == [1, 2, 3]

    def test_constant_factor_freezes_the_forecast(self):
        f = one_factor_fit([2.0, 2.0, 2.0, 2.0],
                           alpha=[-4.0, -4.1, -4.2], beta=[0.5, 0.3, 0.2])
        g = forecast_point(f, 6)
        last_fitted = np.exp(log_fitted(f)[:, -1])
        for h in range(6):
            np.testing.assert_allclose(g.point[:, h], last_fitted, rtol=1e-12)

    def test_one_step_is_last_fit_plus_drift(self, lc_parts):
        f = fit("lc", lc_parts[0])
        g = forecast_point(f, 1)
        expected = (f.alpha_x + f.beta[0]
                    * (f.kappa[0][-1] + f.dynamics.kappa_drift[0]))
        np.testing.assert_allclose(np.log(g.point[:, 0]), expected, atol=1e-12)

    def test_horizon_validation(self, lc_parts):
        f = fit("lc", lc_parts[0])
        with pytest.raises(ValueError, match="at least one forecast horizon"):
            forecast_point(f, 0)

    def test_forecast_needs_dynamics(self):
        f = ModelFit(model="lc", ages=np.arange(3), years=np.arange(2000, 2004),
                     alpha_x=np.zeros(3), beta=(np.ones(3),),
                     kappa=(np.arange(4.0),))
        with pytest.raises(ValueError, match="no factor dynamics attached"):
            forecast_point(f, 2)


class TestSimulatedIntervals:
    def test_single_path_degenerates(self):
        f = one_factor_fit([0.0, 1.0, 2.5, 3.0])
        g = simulate_intervals(f, 4, n_paths=1, seed=5)
        np.testing.assert_array_equal(g.lower, g.upper)

    def test_zero_innovation_collapses_onto_point(self):
        f = one_factor_fit([1.0, 2.0, 3.0, 4.0])   # perfectly linear walk
        assert np.all(f.dynamics.kappa_cov == 0.0)
        g = simulate_intervals(f, 5, n_paths=50, seed=1)
        np.testing.assert_array_equal(g.lower, g.point)
        np.testing.assert_array_equal(g.upper, g.point)

    def test_same_seed_same_grid(self, lc_parts):
        f = fit("lc", lc_parts[0])
        a = simulate_intervals(f, 3, n_paths=200, seed=42)
        b = simulate_intervals(f, 3, n_paths=200, seed=42)
        np.testing.assert_array_equal(a.lower, b.lower)
        np.testing.assert_array_equal(a.upper, b.upper)
        c = simulate_intervals(f, 3, n_paths=200, seed=43)
        assert not np.array_equal(a.lower, c.lower)

    def test_point_is_zero_innovation_path_not_path_mean(self, lc_parts):
        f = fit("lc", lc_parts[0])
        g = simulate_intervals(f, 3, n_paths=200, seed=0)
        np.testing.assert_array_equal(g.point, forecast_point(f, 3).point)

    def test_level_validation(self):
        f = one_factor_fit([1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="strictly between 0 and 1"):
            simulate_intervals(f, 2, level=1.0)
        with pytest.raises(ValueError, match="at least one simulation path"):
            simulate_intervals(f, 2, n_paths=0)

    def test_widening_with_horizon(self, lc_parts):
        # random-walk uncertainty accumulates, so log-widths must grow
        f = fit("lc", lc_parts[0])
        g = simulate_intervals(f, 8, n_paths=500, seed=3)
        widths = np.log(g.upper) - np.log(g.lower)
        assert np.all(widths.mean(axis=0)[1:] >= widths.mean(axis=0)[:-1] - 1e-9)

    def test_coverage_close_to_nominal(self):
        # single known random-walk factor: simulate an 80% interval, then
        # check it against 500 independent draws of the true one-step state
        ages = np.arange(60, 66)
        alpha = np.linspace(-4.5, -3.5, ages.size)
        beta = np.full(ages.size, 1.0 / ages.size)
        drift, sig, k_last = -0.6, 0.25, -3.0
        f = ModelFit(
            model="lc", ages=ages, years=np.arange(1990, 2010),
            alpha_x=alpha, beta=(beta,), kappa=(np.linspace(9.0, -3.0, 20),),
            dynamics=FactorDynamics(kappa_drift=np.array([drift]),
                                    kappa_cov=np.array([[sig ** 2]]),
                                    kappa_last=np.array([k_last])),
            fit_meta=FitMeta(None, 0.0, 2, True, 5),
        )
        g = simulate_intervals(f, 1, level=0.8, n_paths=2000, seed=123)
        rng = np.random.default_rng(2024)
        k_true = k_last + drift + sig * rng.standard_normal(500)
        ln_true = alpha[:, None] + beta[:, None] * k_true[None, :]
        inside = ((np.log(g.lower[:, 0:1]) <= ln_true)
                  & (ln_true <= np.log(g.upper[:, 0:1])))
        assert abs(inside.mean() - 0.80) < 0.05


# ---------------------------------------------------------------------------
# product-ratio coupling
# ---------------------------------------------------------------------------

class TestProductRatio:
    @pytest.fixture(scope="class")
    def pair(self, plateau_surface):
        male = companion_for(plateau_surface)
        ff = fit("pr", plateau_surface, companion=male)
        fm = fit("pr", male, companion=plateau_surface)
        return ff, fm

    def test_needs_companion(self, plateau_surface):
        with pytest.raises(ValueError, match="other gender"):
            fit("pr", plateau_surface)

    def test_same_gender_rejected(self, plateau_surface):
        with pytest.raises(ValueError, match="opposite genders"):
            fit("pr", plateau_surface, companion=plateau_surface)

    def test_forecasts_recombine_from_shared_children(self, pair):
        ff, fm = pair
        h = 4
        gf = forecast_point(ff, h)
        gm = forecast_point(fm, h)
        p = forecast_point(ff.extra["product"], h)
        r = forecast_point(ff.extra["ratio"], h)
        np.testing.assert_allclose(gm.point * gf.point, p.point ** 2,
                                   rtol=1e-10)
        np.testing.assert_allclose(gm.point / gf.point, r.point ** 2,
                                   rtol=1e-10)

    def test_children_identical_across_orderings(self, pair):
        ff, fm = pair
        np.testing.assert_array_equal(ff.extra["product"].fpca.scores,
                                      fm.extra["product"].fpca.scores)
        np.testing.assert_array_equal(ff.extra["ratio"].fpca.basis,
                                      fm.extra["ratio"].fpca.basis)

    def test_fitted_rates_recombine(self, pair):
        ff, fm = pair
        lp = log_fitted(ff.extra["product"])
        lr = log_fitted(ff.extra["ratio"])
        np.testing.assert_allclose(log_fitted(fm), lp + lr, atol=1e-12)
        np.testing.assert_allclose(log_fitted(ff), lp - lr, atol=1e-12)


def test_robust_variant_agrees_on_clean_data(plateau_surface):
    """Without outliers the downweighting never kicks in."""
    a = fit("fdm", plateau_surface)
    b = fit("robust_fdm", plateau_surface)
    np.testing.assert_allclose(log_fitted(b), log_fitted(a), atol=1e-8)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("model", ["lc", "m7", "fdm"])
def test_json_round_trip_preserves_fit(plateau_surface, model):
    f = fit(model, plateau_surface.subset_years(1960, 1995))
    g = fit_from_json(fit_to_json(f))
    np.testing.assert_array_equal(log_fitted(g), log_fitted(f))
    assert g.constraint_residuals == f.constraint_residuals
    assert g.fit_meta == f.fit_meta
    # dynamics survive too, so the reloaded fit forecasts identically
    np.testing.assert_array_equal(forecast_point(g, 5).point,
                                  forecast_point(f, 5).point)


def test_json_round_trip_nested_children(plateau_surface):
    f = fit("pr", plateau_surface, companion=companion_for(plateau_surface))
    g = fit_from_json(fit_to_json(f))
    np.testing.assert_array_equal(log_fitted(g), log_fitted(f))
    np.testing.assert_array_equal(forecast_point(g, 3).point,
                                  forecast_point(f, 3).point)


# ---------------------------------------------------------------------------
# expanding-window runs
# ---------------------------------------------------------------------------

class TestExpandingWindow:
    def test_horizon_counts_shrink(self, lc_surface):
        grids = expanding_window_run("lc", lc_surface, LC_SPLIT, "validation")
        assert [g.point.shape[1] for g in grids] == [5, 4, 3, 2, 1]
        assert [g.origin_year for g in grids] == [1994, 1995, 1996, 1997, 1998]

    def test_noiseless_world_is_easy(self, val_panels):
        # one-step errors on the noiseless rank-1 world are tiny for lc
        panel = val_panels["lc"]
        err = panel.log_point[:, 0, :] - panel.truth_log[:, 0, :]
        assert np.nanmax(np.abs(err)) < 0.02

    def test_panel_shapes_and_nan_triangle(self, val_panels):
        panel = val_panels["lc"]
        A, H, W = panel.point.shape
        assert (H, W) == (5, 5)
        for k in range(W):
            horizon_count = W - k
            assert np.isfinite(panel.point[:, :horizon_count, k]).all()
            assert np.isnan(panel.point[:, horizon_count:, k]).all()
        np.testing.assert_array_equal(panel.valid,
                                      np.isfinite(panel.point[0]))

    def test_bad_phase(self, lc_surface):
        with pytest.raises(ValueError, match="phase must be"):
            expanding_window_run("lc", lc_surface, LC_SPLIT, "holdout")

    def test_test_phase_brings_intervals(self, test_panels):
        panel = test_panels["lc"]
        assert panel.lower is not None and panel.upper is not None
        assert panel.level == 0.8
        ok = panel.valid
        assert np.all(panel.lower[:, ok] <= panel.point[:, ok])
        assert np.all(panel.point[:, ok] <= panel.upper[:, ok] * (1 + 1e-9))

    def test_assemble_rejects_mixed_models(self, lc_surface):
        a = expanding_window_run("lc", lc_surface, LC_SPLIT, "validation")
        b = expanding_window_run("cbd", lc_surface, LC_SPLIT, "validation")
        with pytest.raises(ValueError, match="mix models"):
            assemble_panel([a[0], b[1]], lc_surface)

    def test_assemble_needs_grids(self, lc_surface):
        with pytest.raises(ValueError, match="no forecast grids"):
            assemble_panel([], lc_surface)

    def test_fit_failure_names_origin(self, lc_surface):
        cfg_bad = LC_SPLIT
        short = lc_surface.subset_years(1993, 2009)
        # first origin's training window is 1993..1994, too short to fit
        with pytest.raises(FitError, match="at origin 1994"):
            expanding_window_run("lc", short,
                                 type(cfg_bad)(train=(1993, 1994),
                                               validation=(1995, 1999),
                                               test=(2000, 2009)),
                                 "validation")
