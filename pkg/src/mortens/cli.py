"""Batch command line: one subcommand per pipeline stage.

Each (population, gender) pair is an independent job writing under
``output_dir/<population>_<gender>/``. Stage completion is marked with a
``.<stage>.done`` file; a marked stage is skipped without writing anything
unless ``--force`` is given. Every directory a stage touches receives
``config.json``, the resolved configuration echo, so results stay
traceable. All tables are CSV with fixed column order and 17-digit float
formatting, which makes reruns of the same seed byte-identical.

Exit codes: 0 all jobs clean, 1 every job failed, 2 partial (some jobs
failed, or a job completed with degraded content such as skipped models).
"""
from __future__ import annotations

import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from mortens.config import (ALPHA_MODES, ConfigError, GENDER_LABELS,
                            RunConfig, config_echo, load_config)
from mortens.data.surface import MortalitySurface, SurfaceError, load_surface, write_surface
from mortens.data.synthetic import GENERATORS, synthesize_surface
from mortens.ensembles import (EnsembleError, IntervalEnsembleSpec,
                               aic_weights, combine_panel_intervals,
                               combine_panel_points, mse_weights, sma_weights)
from mortens.evaluation import (EvalError, age_stratified_mse, dm_test,
                                mean_interval_score, point_scores,
                                selection_frequency)
from mortens.models.base import FitError, ForecastGrid, fit_to_json
from mortens.models.registry import fit as fit_model
from mortens.models.window import (ForecastPanel, assemble_panel,
                                   expanding_window_run)
from mortens.shapley import (ShapError, mean_normalized_shap, select_alpha,
                             shap_report, shap_weights)

INTERVAL_KEYS = ("sa", "it", "aic", "mse", "shap")
INTERVAL_LABELS = {"sa": "SA", "it": "IT", "aic": "AIC", "mse": "MSE",
                   "shap": "SHAP"}

# threshold selection scores candidates at this validation horizon
ALPHA_SELECT_HORIZON = 1


class StageError(RuntimeError):
    """A stage cannot run: missing prerequisite artifacts or bad inputs."""


# ---------------------------------------------------------------------------
# small shared plumbing
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    """Full-precision cell value; empty for missing."""
    if x is None:
        return ""
    x = float(x)
    return "" if not np.isfinite(x) else f"{x:.17g}"


def _cell(s: str) -> float:
    return float(s) if s else float("nan")


def _pct(alpha: float) -> str:
    return f"{alpha * 100:g}%"


def _point_labels(alpha: float) -> dict[str, str]:
    return {
        "shap": "SHAP",
        "shap_truncated": f"SHAP α={_pct(alpha)}",
        "sma": "Average",
        "aic": "AIC",
    }


def _job_dir(cfg: RunConfig, pop: str, gender: str) -> Path:
    return Path(cfg.output_dir) / f"{pop}_{GENDER_LABELS[gender]}"


def _config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_echo(cfg).encode()).hexdigest()


def _stage_done(d: Path, stage: str, cfg: RunConfig) -> bool:
    """True when the stage completed under this exact configuration."""
    p = d / f".{stage}.done"
    return p.exists() and p.read_text().strip() == _config_hash(cfg)


def _mark_done(d: Path, stage: str, cfg: RunConfig) -> None:
    (d / f".{stage}.done").write_text(_config_hash(cfg) + "\n", encoding="utf-8")


def _write_echo(cfg: RunConfig, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(config_echo(cfg), encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_job_surface(cfg: RunConfig, pop: str, gender: str) -> MortalitySurface:
    path = cfg.path_for(pop, gender)
    if path is None:
        raise StageError(f"no data configured for {pop} {GENDER_LABELS[gender]}")
    return load_surface(path, gender,
                        years=(cfg.split.train[0], cfg.split.test[1]),
                        population_id=pop)


def _load_companion(cfg: RunConfig, pop: str, gender: str) -> MortalitySurface | None:
    other = "M" if gender == "F" else "F"
    if cfg.path_for(pop, other) is None:
        return None
    return _load_job_surface(cfg, pop, other)


@dataclass
class JobResult:
    population: str
    gender: str
    ok: bool = True
    partial: bool = False
    ran: bool = True
    messages: list[str] = field(default_factory=list)


def _run_jobs(cfg: RunConfig, n_jobs: int, fn) -> list[JobResult]:
    """Run fn(pop, gender) for every configured pair, n_jobs at a time."""

    def wrapped(job):
        pop, g = job
        try:
            return fn(pop, g)
        except (StageError, FitError, SurfaceError, EnsembleError,
                ShapError, EvalError, OSError, ValueError) as exc:
            return JobResult(pop, g, ok=False, messages=[str(exc)])

    jobs = cfg.jobs()
    if n_jobs <= 1 or len(jobs) <= 1:
        return [wrapped(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(wrapped, jobs))


def _report_and_exit(results: list[JobResult], stage: str) -> None:
    for r in results:
        who = f"{r.population} {GENDER_LABELS[r.gender]}"
        for msg in r.messages:
            tag = "error" if not r.ok else "warning"
            click.echo(f"{tag}: stage {stage} ({who}): {msg}", err=True)
        if not r.ran and r.ok:
            click.echo(f"{stage} ({who}): already complete, skipping", err=True)
    oks = [r.ok for r in results]
    if all(oks):
        sys.exit(2 if any(r.partial for r in results) else 0)
    sys.exit(2 if any(oks) else 1)


def _load_cfg(config_path: str, **overrides) -> RunConfig:
    try:
        return load_config(config_path, overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _config_options(f):
    opts = [
        click.option("-c", "--config", "config_path", required=True,
                     type=click.Path(), help="YAML run configuration."),
        click.option("--models", "models_opt", default=None,
                     help="Comma-separated model subset override."),
        click.option("--seed", type=int, default=None, help="Seed override."),
        click.option("--output-dir", "output_dir_opt", default=None,
                     help="Output directory override."),
        click.option("--jobs", "n_jobs", type=int, default=1, show_default=True,
                     help="Concurrent (population, gender) jobs."),
        click.option("--force", is_flag=True,
                     help="Redo stages already marked complete."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


# ---------------------------------------------------------------------------
# forecast artifact round trip
# ---------------------------------------------------------------------------

GRID_HEADER = ["model", "age", "horizon", "point", "lower", "upper"]


def _write_grid_csv(path: Path, grid: ForecastGrid) -> None:
    rows = []
    for i, age in enumerate(grid.ages):
        for j, h in enumerate(grid.horizons):
            lo = grid.lower[i, j] if grid.lower is not None else None
            up = grid.upper[i, j] if grid.upper is not None else None
            rows.append([grid.model, int(age), int(h),
                         _fmt(grid.point[i, j]), _fmt(lo), _fmt(up)])
    _write_csv(path, GRID_HEADER, rows)


def _grid_tables(path: Path):
    """Parse one grid CSV into (model, ages, horizons, point, lower, upper)."""
    rows = _read_csv(path)
    if not rows:
        raise StageError(f"{path}: empty forecast file")
    label_col = "model" if "model" in rows[0] else "method"
    model = rows[0][label_col]
    ages = np.array(sorted({int(r["age"]) for r in rows}))
    horizons = np.array(sorted({int(r["horizon"]) for r in rows}))
    apos = {int(a): i for i, a in enumerate(ages)}
    hpos = {int(h): j for j, h in enumerate(horizons)}
    shape = (ages.size, horizons.size)
    point = np.full(shape, np.nan)
    lower = np.full(shape, np.nan)
    upper = np.full(shape, np.nan)
    for r in rows:
        i, j = apos[int(r["age"])], hpos[int(r["horizon"])]
        point[i, j] = _cell(r["point"])
        lower[i, j] = _cell(r["lower"])
        upper[i, j] = _cell(r["upper"])
    return model, ages, horizons, point, lower, upper


def _read_grid_csv(path: Path, origin: int, gender: str, pop: str,
                   level: float) -> ForecastGrid:
    model, ages, horizons, point, lower, upper = _grid_tables(path)
    has_iv = np.isfinite(lower).any()
    return ForecastGrid(
        model=model, origin_year=origin, ages=ages, horizons=horizons,
        point=point,
        lower=lower if has_iv else None,
        upper=upper if has_iv else None,
        level=level if has_iv else None,
        gender=gender, population_id=pop)


def _grid_files(fdir: Path, model: str) -> list[tuple[int, Path]]:
    out = []
    for p in fdir.glob(f"{model}_*.csv"):
        tail = p.stem.rsplit("_", 1)[1]
        if p.stem[: -len(tail) - 1] == model and tail.isdigit():
            out.append((int(tail), p))
    return sorted(out)


def _panels_from_csv(cfg: RunConfig, pop: str, gender: str, phase: str,
                     surface: MortalitySurface) -> dict[str, ForecastPanel]:
    fdir = _job_dir(cfg, pop, gender) / "forecasts" / phase
    level = 1.0 - cfg.theta
    panels = {}
    for m in cfg.models:
        files = _grid_files(fdir, m)
        if not files:
            raise StageError(
                f"no {phase} forecasts for {m} under {fdir}; "
                f"run `mortens forecast --phase {phase}` first")
        grids = [_read_grid_csv(p, origin, gender, pop, level)
                 for origin, p in files]
        panels[m] = assemble_panel(grids, surface)
    return panels


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_job(cfg: RunConfig, pop: str, gender: str, force: bool,
             allow_partial: bool) -> JobResult:
    res = JobResult(pop, gender)
    d = _job_dir(cfg, pop, gender)
    if _stage_done(d, "fit", cfg) and not force:
        res.ran = False
        return res
    surface = _load_job_surface(cfg, pop, gender)
    train = surface.subset_years(*cfg.split.train)
    companion = None
    if "pr" in cfg.models:
        comp = _load_companion(cfg, pop, gender)
        companion = comp.subset_years(*cfg.split.train) if comp else None
    fits_dir = d / "fits"
    fits_dir.mkdir(parents=True, exist_ok=True)
    usable = 0
    for m in cfg.models:
        try:
            f = fit_model(m, train, companion=companion)
        except Exception as exc:  # noqa: BLE001 - every model gets its chance
            res.messages.append(f"{m} failed: {exc}")
            res.ok = allow_partial
            res.partial = res.partial or allow_partial
            continue
        (fits_dir / f"{m}.json").write_text(fit_to_json(f), encoding="utf-8")
        if f.fit_meta.converged:
            usable += 1
        else:
            res.messages.append(f"{m} did not converge: {f.fit_meta.message}")
            res.ok = allow_partial
            res.partial = res.partial or allow_partial
    if usable < len(cfg.models):
        res.messages.append(f"{usable} of {len(cfg.models)} models usable")
    _write_echo(cfg, d)
    if res.ok:
        _mark_done(d, "fit", cfg)
    return res


@click.group()
def main() -> None:
    """Mortality forecast combination pipeline."""


@main.command()
@_config_options
@click.option("--allow-partial", is_flag=True,
              help="Keep going past models that fail or stall.")
def fit(config_path, models_opt, seed, output_dir_opt, n_jobs, force,
        allow_partial):
    """Fit every configured model once on the training window."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(cfg, n_jobs,
                        lambda p, g: _fit_job(cfg, p, g, force, allow_partial))
    _report_and_exit(results, "fit")


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------

def _forecast_job(cfg: RunConfig, pop: str, gender: str, phase: str,
                  force: bool) -> JobResult:
    res = JobResult(pop, gender)
    d = _job_dir(cfg, pop, gender)
    stage = f"forecast_{phase}"
    if _stage_done(d, stage, cfg) and not force:
        res.ran = False
        return res
    surface = _load_job_surface(cfg, pop, gender)
    companion = _load_companion(cfg, pop, gender) if "pr" in cfg.models else None
    fdir = d / "forecasts" / phase
    fdir.mkdir(parents=True, exist_ok=True)
    for m in cfg.models:
        grids = expanding_window_run(
            m, surface, cfg.split, phase, companion=companion,
            n_paths=cfg.n_paths, level=1.0 - cfg.theta, seed=cfg.seed)
        for grid in grids:
            _write_grid_csv(fdir / f"{m}_{grid.origin_year}.csv", grid)
    _write_echo(cfg, d)
    _mark_done(d, stage, cfg)
    return res


@main.command()
@_config_options
@click.option("--phase", type=click.Choice(["validation", "test"]),
              required=True, help="Forecast origin window to walk.")
def forecast(config_path, models_opt, seed, output_dir_opt, n_jobs, force,
             phase):
    """Expanding-window forecasts for one phase (intervals in test)."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(cfg, n_jobs,
                        lambda p, g: _forecast_job(cfg, p, g, phase, force))
    _report_and_exit(results, f"forecast_{phase}")


# ---------------------------------------------------------------------------
# shap
# ---------------------------------------------------------------------------

def _shap_job(cfg: RunConfig, pop: str, gender: str, force: bool) -> JobResult:
    res = JobResult(pop, gender)
    d = _job_dir(cfg, pop, gender)
    if _stage_done(d, "shap", cfg) and not force:
        res.ran = False
        return res
    surface = _load_job_surface(cfg, pop, gender)
    panels = _panels_from_csv(cfg, pop, gender, "validation", surface)
    report = shap_report(panels)
    sdir = d / "shap"
    sdir.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, m in enumerate(report.players):
        for a_idx, age in enumerate(report.ages):
            for h_idx, h in enumerate(report.horizons):
                rows.append([m, int(age), int(h),
                             _fmt(report.phi[i, a_idx, h_idx])])
    _write_csv(sdir / "phi.csv", ["model", "age", "horizon", "phi"], rows)
    # normalized per-age summary driving the weights; phi.csv alone cannot
    # reproduce it because the summary comes from the pooled per-age game
    rows = [[m, int(age), _fmt(report.phi_mean[i, a_idx])]
            for i, m in enumerate(report.players)
            for a_idx, age in enumerate(report.ages)]
    _write_csv(sdir / "phi_age.csv", ["model", "age", "phi"], rows)

    if cfg.alpha_mode == "fixed":
        alpha = float(cfg.alpha_value)
        choice = {"alpha": alpha, "mode": cfg.alpha_mode}
    else:
        sel = select_alpha(report, panels, ALPHA_SELECT_HORIZON,
                           grid=cfg.alpha_grid)
        alpha = sel.alpha
        choice = {"alpha": alpha, "mode": cfg.alpha_mode,
                  "horizon": sel.horizon, "grid": list(sel.grid),
                  "mse": list(sel.mse)}
    (sdir / "alpha.json").write_text(
        json.dumps(choice, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    rows = []
    for age in report.ages:
        wv = shap_weights(report, int(age), alpha)
        for m in report.players:
            rows.append([m, int(age), _fmt(alpha), _fmt(wv.weights[m])])
    _write_csv(sdir / "weights.csv", ["model", "age", "alpha", "weight"], rows)

    counts = selection_frequency(report, alpha)
    _write_csv(sdir / "selection.csv", ["model", "count"],
               [[m, counts[m]] for m in report.players])
    _write_echo(cfg, d)
    _mark_done(d, "shap", cfg)
    return res


def _aggregate_selection(cfg: RunConfig) -> bool:
    """Sum per-population selection counts into <output>/selection.csv."""
    totals: dict[tuple[str, str], int] = {}
    pops: list[str] = []
    for pop, g in cfg.jobs():
        path = _job_dir(cfg, pop, g) / "shap" / "selection.csv"
        if not path.exists():
            continue
        if pop not in pops:
            pops.append(pop)
        for r in _read_csv(path):
            key = (pop, r["model"])
            totals[key] = totals.get(key, 0) + int(r["count"])
    if not totals:
        return False
    rows = [[pop, m, totals[(pop, m)]]
            for pop in pops for m in cfg.models if (pop, m) in totals]
    _write_csv(Path(cfg.output_dir) / "selection.csv",
               ["country", "model", "count"], rows)
    return True


@main.command()
@_config_options
def shap(config_path, models_opt, seed, output_dir_opt, n_jobs, force):
    """Shapley attribution on validation forecasts, plus threshold choice."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(cfg, n_jobs, lambda p, g: _shap_job(cfg, p, g, force))
    if any(r.ran for r in results) or \
            not (Path(cfg.output_dir) / "selection.csv").exists():
        if not _aggregate_selection(cfg):
            click.echo("warning: no selection counts to aggregate", err=True)
    _report_and_exit(results, "shap")


# ---------------------------------------------------------------------------
# combine
# ---------------------------------------------------------------------------

def _load_report(cfg: RunConfig, pop: str, gender: str):
    """Rebuild the Shapley report and threshold from the shap artifacts."""
    sdir = _job_dir(cfg, pop, gender) / "shap"
    phi_path = sdir / "phi.csv"
    if not phi_path.exists():
        raise StageError(f"{phi_path} missing; run `mortens shap` first")
    rows = _read_csv(phi_path)
    players = tuple(m for m in cfg.models if any(r["model"] == m for r in rows))
    ages = np.array(sorted({int(r["age"]) for r in rows}))
    horizons = np.array(sorted({int(r["horizon"]) for r in rows}))
    ppos = {m: i for i, m in enumerate(players)}
    apos = {int(a): i for i, a in enumerate(ages)}
    hpos = {int(h): i for i, h in enumerate(horizons)}
    phi = np.full((len(players), ages.size, horizons.size), np.nan)
    for r in rows:
        phi[ppos[r["model"]], apos[int(r["age"])], hpos[int(r["horizon"])]] = \
            _cell(r["phi"])
    if np.isnan(phi).any():
        raise StageError(f"{phi_path}: incomplete attribution table")
    age_path = sdir / "phi_age.csv"
    if not age_path.exists():
        raise StageError(f"{age_path} missing; rerun `mortens shap`")
    phi_age = np.full((len(players), ages.size), np.nan)
    for r in _read_csv(age_path):
        phi_age[ppos[r["model"]], apos[int(r["age"])]] = _cell(r["phi"])
    if np.isnan(phi_age).any():
        raise StageError(f"{age_path}: incomplete summary table")
    report = mean_normalized_shap(players, ages, horizons, phi,
                                  phi_age=phi_age,
                                  gender=gender, population_id=pop)
    alpha = float(json.loads((sdir / "alpha.json").read_text())["alpha"])
    return report, alpha


def _validation_errors(panels: dict[str, ForecastPanel]) -> dict[str, np.ndarray]:
    out = {}
    for m, p in panels.items():
        err = p.log_point - p.truth_log
        out[m] = err[np.isfinite(err)]
    return out


def _combined_rows(label: str, ages, horizons, point, lower, upper, k: int):
    rows = []
    for i, age in enumerate(ages):
        for j, h in enumerate(horizons):
            pt = point[i, j, k] if point is not None else None
            lo = lower[i, j, k] if lower is not None else None
            up = upper[i, j, k] if upper is not None else None
            has_pt = pt is not None and np.isfinite(pt)
            has_iv = lo is not None and np.isfinite(lo)
            if not has_pt and not has_iv:
                continue  # cell beyond this origin's window
            rows.append([label, int(age), int(h), _fmt(pt), _fmt(lo), _fmt(up)])
    return rows


def _combine_job(cfg: RunConfig, pop: str, gender: str, force: bool) -> JobResult:
    res = JobResult(pop, gender)
    d = _job_dir(cfg, pop, gender)
    if _stage_done(d, "combine", cfg) and not force:
        res.ran = False
        return res
    surface = _load_job_surface(cfg, pop, gender)
    val_panels = _panels_from_csv(cfg, pop, gender, "validation", surface)
    test_panels = _panels_from_csv(cfg, pop, gender, "test", surface)
    report, alpha = _load_report(cfg, pop, gender)
    models = tuple(cfg.models)
    ages = next(iter(test_panels.values())).ages

    w_shap = {int(a): shap_weights(report, int(a), 0.0) for a in ages}
    w_trunc = {int(a): shap_weights(report, int(a), alpha) for a in ages}
    w_sma = sma_weights(models)

    fits_dir = d / "fits"
    kmap = {}
    for m in models:
        p = fits_dir / f"{m}.json"
        if not p.exists():
            raise StageError(f"{p} missing; run `mortens fit` first")
        kmap[m] = int(json.loads(p.read_text())["fit_meta"]["k"])
    val_err = _validation_errors(val_panels)
    try:
        w_aic = aic_weights(val_err, kmap)
    except EnsembleError as exc:
        res.messages.append(f"AIC weights unavailable ({exc}); using the "
                            f"simple average instead")
        w_aic = sma_weights(models)
    w_mse = mse_weights({m: float(np.mean(e ** 2)) for m, e in val_err.items()})

    labels = _point_labels(alpha)
    point_sets = {
        "shap": combine_panel_points(test_panels, w_shap, name=labels["shap"]),
        "shap_truncated": combine_panel_points(test_panels, w_trunc,
                                               name=labels["shap_truncated"]),
        "sma": combine_panel_points(test_panels, w_sma, name=labels["sma"]),
        "aic": combine_panel_points(test_panels, w_aic, name=labels["aic"]),
    }

    trim = int(len(models) * 0.2 + 1e-9)
    iv_weights = {"aic": w_aic, "mse": w_mse, "shap": w_shap}
    iv_sets = {}
    for key in INTERVAL_KEYS:
        spec = IntervalEnsembleSpec(key, trim_d=trim, theta=cfg.theta)
        iv_sets[key] = combine_panel_intervals(test_panels, spec,
                                               weights=iv_weights.get(key))

    cdir = d / "combined"
    cdir.mkdir(parents=True, exist_ok=True)
    ref = next(iter(test_panels.values()))
    for k, origin in enumerate(ref.origins):
        for key, panel in point_sets.items():
            _write_csv(cdir / f"point_{key}_{int(origin)}.csv",
                       ["method", "age", "horizon", "point", "lower", "upper"],
                       _combined_rows(panel.model, ref.ages, ref.horizons,
                                      panel.point, None, None, k))
        for key, (lo, up) in iv_sets.items():
            _write_csv(cdir / f"interval_{key}_{int(origin)}.csv",
                       ["method", "age", "horizon", "point", "lower", "upper"],
                       _combined_rows(INTERVAL_LABELS[key], ref.ages,
                                      ref.horizons, None, lo, up, k))

    per_age = {"shap": (w_shap, 0.0), "shap_truncated": (w_trunc, alpha)}
    flat = {"sma": w_sma, "aic": w_aic, "mse": w_mse}
    for key, (wmap, a) in per_age.items():
        rows = [[m, int(age), _fmt(a), _fmt(wmap[int(age)].weights[m])]
                for age in ages for m in models]
        _write_csv(cdir / f"weights_{key}.csv",
                   ["model", "age", "alpha", "weight"], rows)
    for key, wv in flat.items():
        rows = [[m, int(age), "", _fmt(wv.weights[m])]
                for age in ages for m in models]
        _write_csv(cdir / f"weights_{key}.csv",
                   ["model", "age", "alpha", "weight"], rows)
    _write_echo(cfg, d)
    _mark_done(d, "combine", cfg)
    return res


@main.command()
@_config_options
def combine(config_path, models_opt, seed, output_dir_opt, n_jobs, force):
    """Build every point and interval ensemble on the test forecasts."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(cfg, n_jobs, lambda p, g: _combine_job(cfg, p, g, force))
    _report_and_exit(results, "combine")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _combined_point_panels(cfg, pop, gender, surface, alpha):
    d = _job_dir(cfg, pop, gender) / "combined"
    panels = {}
    for key, label in _point_labels(alpha).items():
        files = _grid_files(d, f"point_{key}")
        if not files:
            raise StageError(
                f"no combined forecasts under {d}; run `mortens combine` first")
        grids = [_read_grid_csv(p, origin, gender, pop, 1.0 - cfg.theta)
                 for origin, p in files]
        panels[label] = assemble_panel(grids, surface)
    return panels


def _combined_interval_panels(cfg, pop, gender, ref: ForecastPanel):
    """Interval ensembles as panels sharing the member window layout."""
    d = _job_dir(cfg, pop, gender) / "combined"
    apos = {int(a): i for i, a in enumerate(ref.ages)}
    opos = {int(o): k for k, o in enumerate(ref.origins)}
    out = {}
    for key in INTERVAL_KEYS:
        files = _grid_files(d, f"interval_{key}")
        if not files:
            raise StageError(
                f"no combined intervals under {d}; run `mortens combine` first")
        shape = (ref.ages.size, ref.horizons.size, ref.origins.size)
        lower = np.full(shape, np.nan)
        upper = np.full(shape, np.nan)
        for origin, path in files:
            k = opos[int(origin)]
            for r in _read_csv(path):
                i = apos[int(r["age"])]
                j = int(r["horizon"]) - 1
                lower[i, j, k] = _cell(r["lower"])
                upper[i, j, k] = _cell(r["upper"])
        out[INTERVAL_LABELS[key]] = (lower, upper)
    return out


def _evaluate_job(cfg: RunConfig, pop: str, gender: str, force: bool) -> JobResult:
    res = JobResult(pop, gender)
    d = _job_dir(cfg, pop, gender)
    if _stage_done(d, "evaluate", cfg) and not force:
        res.ran = False
        return res
    glabel = GENDER_LABELS[gender]
    surface = _load_job_surface(cfg, pop, gender)
    members = _panels_from_csv(cfg, pop, gender, "test", surface)
    report, alpha = _load_report(cfg, pop, gender)
    ensembles = _combined_point_panels(cfg, pop, gender, surface, alpha)
    ref = next(iter(members.values()))
    iv_sets = _combined_interval_panels(cfg, pop, gender, ref)
    W = ref.origins.size

    all_points = dict(ensembles)
    all_points.update(members)
    edir = d / "eval"
    edir.mkdir(parents=True, exist_ok=True)

    score_rows, x100_rows = [], []
    point_summary: dict[str, dict] = {}
    for label, panel in all_points.items():
        point_summary[label] = {}
        for h in range(1, W + 1):
            mse, mae = point_scores(panel, h)
            score_rows.append([label, glabel, h, _fmt(mse), _fmt(mae)])
            x100_rows.append([label, glabel, h, _fmt(100.0 * mse)])
            point_summary[label][str(h)] = {
                "mse": mse, "mse_x100": 100.0 * mse, "mae": mae}
    _write_csv(edir / "scores.csv",
               ["method", "gender", "horizon", "mse", "mae"], score_rows)
    _write_csv(edir / "scores_x100.csv",
               ["method", "gender", "horizon", "mse_x100"], x100_rows)

    iv_rows = []
    iv_summary: dict[str, dict] = {}
    iv_cubes = dict(iv_sets)
    for m, p in members.items():
        if p.lower is not None:
            iv_cubes[m] = (p.lower, p.upper)
    with np.errstate(invalid="ignore", divide="ignore"):
        for label, (lo, up) in iv_cubes.items():
            iv_summary[label] = {}
            for h in range(1, W + 1):
                s = mean_interval_score(np.log(lo), np.log(up), ref.truth_log,
                                        h, theta=cfg.theta)
                iv_rows.append([label, glabel, h, _fmt(s)])
                iv_summary[label][str(h)] = s
    _write_csv(edir / "interval_scores.csv",
               ["method", "gender", "horizon", "interval_score"], iv_rows)

    shap_panel = ensembles["SHAP"]
    rivals = [lbl for lbl in ensembles if lbl != "SHAP"]
    dm_summary: dict[str, dict] = {}
    for h in range(1, W + 1):
        n = W - h + 1
        if n < 5:
            continue
        rows = []
        for a_idx, age in enumerate(ref.ages):
            e_a = (shap_panel.log_point - shap_panel.truth_log)[a_idx, h - 1, :n]
            for lbl in rivals:
                other = ensembles[lbl]
                e_b = (other.log_point - other.truth_log)[a_idx, h - 1, :n]
                r = dm_test(e_a, e_b, h)
                rows.append([int(age), f"SHAP vs {lbl}",
                             "" if r.p_value is None else _fmt(r.p_value)])
        _write_csv(edir / f"dm_h{h}.csv", ["age", "pair", "p_value"], rows)
        dm_summary[str(h)] = {
            f"SHAP vs {lbl}": sum(1 for r in rows
                                  if r[1] == f"SHAP vs {lbl}" and r[2] != ""
                                  and float(r[2]) > 0.95)
            for lbl in rivals}

    groups = age_stratified_mse(all_points)
    rows = [[grp, meth, _fmt(groups.standardized[i, j])]
            for i, grp in enumerate(groups.groups)
            for j, meth in enumerate(groups.methods)]
    _write_csv(edir / "age_groups.csv", ["group", "method", "std_mse"], rows)

    counts = selection_frequency(report, alpha)
    _write_csv(edir / "selection.csv", ["model", "count"],
               [[m, counts[m]] for m in report.players])

    summary = {
        "population": pop,
        "gender": glabel,
        "alpha": alpha,
        "theta": cfg.theta,
        "point": point_summary,
        "intervals": iv_summary,
        "dm_wins_p95": dm_summary,
        "selection": counts,
    }
    (edir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _write_echo(cfg, d)
    _mark_done(d, "evaluate", cfg)
    return res


@main.command()
@_config_options
def evaluate(config_path, models_opt, seed, output_dir_opt, n_jobs, force):
    """Score members and ensembles; write the report tables."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(cfg, n_jobs,
                        lambda p, g: _evaluate_job(cfg, p, g, force))
    _report_and_exit(results, "evaluate")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _pipeline_job(cfg: RunConfig, pop: str, gender: str, force: bool,
                  allow_partial: bool) -> JobResult:
    stages = [
        ("fit", lambda: _fit_job(cfg, pop, gender, force, allow_partial)),
        ("forecast_validation",
         lambda: _forecast_job(cfg, pop, gender, "validation", force)),
        ("shap", lambda: _shap_job(cfg, pop, gender, force)),
        ("forecast_test",
         lambda: _forecast_job(cfg, pop, gender, "test", force)),
        ("combine", lambda: _combine_job(cfg, pop, gender, force)),
        ("evaluate", lambda: _evaluate_job(cfg, pop, gender, force)),
    ]
    res = JobResult(pop, gender, ran=False)
    for name, step in stages:
        try:
            r = step()
        except (StageError, FitError, SurfaceError, EnsembleError,
                ShapError, EvalError, OSError, ValueError) as exc:
            res.ok = False
            res.messages.append(f"stage {name}: {exc}")
            return res
        res.ran = res.ran or r.ran
        res.partial = res.partial or r.partial
        res.messages.extend(f"stage {name}: {m}" for m in r.messages)
        if not r.ok:
            res.ok = False
            return res
    return res


@main.command()
@_config_options
@click.option("--allow-partial", is_flag=True,
              help="Keep going past models that fail or stall.")
def pipeline(config_path, models_opt, seed, output_dir_opt, n_jobs, force,
             allow_partial):
    """Run fit, forecasts, attribution, combination, and scoring in order."""
    cfg = _load_cfg(config_path, models=models_opt, seed=seed,
                    output_dir=output_dir_opt)
    results = _run_jobs(
        cfg, n_jobs,
        lambda p, g: _pipeline_job(cfg, p, g, force, allow_partial))
    if any(r.ran for r in results) or \
            not (Path(cfg.output_dir) / "selection.csv").exists():
        _aggregate_selection(cfg)
    _report_and_exit(results, "pipeline")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command()
@click.option("--generator", required=True,
              type=click.Choice(sorted(GENERATORS)),
              help="Synthetic world to draw from.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", "out_path", required=True, type=click.Path(),
              help="Destination CSV (age,year,deaths,exposure).")
@click.option("--gender", type=click.Choice(["female", "male"]),
              default="female", show_default=True)
@click.option("--age-min", type=int, default=None)
@click.option("--age-max", type=int, default=None)
@click.option("--year-min", type=int, default=None)
@click.option("--n-years", type=int, default=None)
@click.option("--exposure-level", type=float, default=None)
@click.option("--noise", type=click.Choice(["none", "poisson"]), default=None)
def synth(generator, seed, out_path, gender, age_min, age_max, year_min,
          n_years, exposure_level, noise):
    """Write a deterministic synthetic mortality surface as fixture CSV."""
    spec = {"generator": generator,
            "gender": "F" if gender == "female" else "M"}
    for key, val in (("age_min", age_min), ("age_max", age_max),
                     ("year_min", year_min), ("n_years", n_years),
                     ("exposure_level", exposure_level), ("noise", noise)):
        if val is not None:
            spec[key] = val
    try:
        surface = synthesize_surface(spec, seed)
    except SurfaceError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_surface(surface, out)
    click.echo(f"wrote {surface.n_ages} ages x {surface.n_years} years to {out}")


if __name__ == "__main__":
    main()
