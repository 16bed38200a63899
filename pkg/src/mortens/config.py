"""Run configuration for the batch commands.

One YAML file describes a whole run: which populations and data files,
how the years are split, which models compete, how the truncation
threshold is chosen, and where output lands. Every field can be
overridden from the command line; validation happens once, after the
overrides are applied, so a bad flag and a bad file fail the same way.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from mortens.data.surface import SplitConfig, SurfaceError
from mortens.models.base import MODEL_IDS
from mortens.shapley import DEFAULT_ALPHA_GRID, FINE_ALPHA_GRID

__all__ = ["ConfigError", "RunConfig", "load_config", "config_echo",
           "ALPHA_MODES", "GENDER_LABELS"]

ALPHA_MODES = ("fixed", "small_grid", "fine_grid")

# canonical one-letter codes internally; long labels in files and on disk
GENDER_LABELS = {"F": "female", "M": "male"}
_GENDER_CODES = {"female": "F", "f": "F", "male": "M", "m": "M"}

_TOP_KEYS = {"data", "split", "models", "alpha_mode", "alpha_value",
             "theta", "n_paths", "seed", "output_dir"}


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved, validated configuration for one batch run.

    ``data`` rows are (population, gender code, absolute path) triples in
    file order; helper accessors below give the per-job view.
    """

    data: tuple[tuple[str, str, str], ...]
    split: SplitConfig
    models: tuple[str, ...]
    alpha_mode: str
    alpha_value: float | None
    theta: float
    n_paths: int
    seed: int
    output_dir: str

    def jobs(self) -> tuple[tuple[str, str], ...]:
        """(population, gender code) pairs in configuration order."""
        return tuple((pop, g) for pop, g, _ in self.data)

    def path_for(self, population: str, gender: str) -> str | None:
        for pop, g, path in self.data:
            if pop == population and g == gender:
                return path
        return None

    @property
    def alpha_grid(self) -> tuple[float, ...]:
        if self.alpha_mode == "fixed":
            return (float(self.alpha_value),)
        if self.alpha_mode == "small_grid":
            return DEFAULT_ALPHA_GRID
        return FINE_ALPHA_GRID


def _as_window(name: str, value: Any) -> tuple[int, int]:
    try:
        lo, hi = value
        return int(lo), int(hi)
    except (TypeError, ValueError):
        raise ConfigError(
            f"split.{name} must be a [first, last] year pair, got {value!r}"
        ) from None


def load_config(path: str | Path,
                overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Load and validate a YAML run configuration.

    ``overrides`` maps top-level keys to replacement values (None entries
    are ignored), so command-line flags can be layered on before any
    checking. Data paths are resolved against the config file's directory.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val

    base = path.resolve().parent
    data_raw = raw.get("data")
    if not isinstance(data_raw, dict) or not data_raw:
        raise ConfigError("config needs a 'data' mapping of populations")
    rows: list[tuple[str, str, str]] = []
    for pop, genders in data_raw.items():
        if not isinstance(genders, dict) or not genders:
            raise ConfigError(f"data.{pop} must map genders to file paths")
        for gkey, p in genders.items():
            code = _GENDER_CODES.get(str(gkey).lower())
            if code is None:
                raise ConfigError(
                    f"data.{pop}: unknown gender {gkey!r} (use female/male)")
            resolved = Path(p)
            if not resolved.is_absolute():
                resolved = base / resolved
            if not resolved.exists():
                raise ConfigError(
                    f"data.{pop}.{GENDER_LABELS[code]}: no such file {resolved}")
            rows.append((str(pop), code, str(resolved)))
    seen = set()
    for pop, g, _ in rows:
        if (pop, g) in seen:
            raise ConfigError(f"data.{pop}: gender {GENDER_LABELS[g]} listed twice")
        seen.add((pop, g))

    split_raw = raw.get("split", {})
    if not isinstance(split_raw, dict):
        raise ConfigError("split must be a mapping of train/validation/test")
    kwargs = {}
    for name in ("train", "validation", "test"):
        if name in split_raw:
            kwargs[name] = _as_window(name, split_raw[name])
    extra = set(split_raw) - {"train", "validation", "test"}
    if extra:
        raise ConfigError(f"unknown split key(s): {', '.join(sorted(extra))}")
    try:
        split = SplitConfig(**kwargs)
    except SurfaceError as exc:
        raise ConfigError(str(exc)) from None

    models_raw = raw.get("models", list(MODEL_IDS))
    if isinstance(models_raw, str):
        models_raw = [m.strip() for m in models_raw.split(",") if m.strip()]
    models: list[str] = []
    for m in models_raw:
        if m not in MODEL_IDS:
            raise ConfigError(
                f"unknown model {m!r}; expected one of {', '.join(MODEL_IDS)}")
        if m not in models:
            models.append(m)
    if not models:
        raise ConfigError("empty model list")

    alpha_mode = str(raw.get("alpha_mode", "fixed"))
    if alpha_mode not in ALPHA_MODES:
        raise ConfigError(
            f"alpha_mode must be one of {', '.join(ALPHA_MODES)}, "
            f"got {alpha_mode!r}")
    alpha_value = raw.get("alpha_value", 0.5 if alpha_mode == "fixed" else None)
    if alpha_mode == "fixed":
        if alpha_value is None:
            raise ConfigError("alpha_mode 'fixed' requires alpha_value")
        alpha_value = float(alpha_value)
        if not 0 <= alpha_value < 1:
            raise ConfigError(f"alpha_value must lie in [0, 1), got {alpha_value}")
    elif alpha_value is not None:
        raise ConfigError(
            f"alpha_value only applies to alpha_mode 'fixed', not {alpha_mode!r}")

    theta = float(raw.get("theta", 0.2))
    if not 0 < theta < 1:
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    n_paths = int(raw.get("n_paths", 1000))
    if n_paths < 1:
        raise ConfigError(f"n_paths must be positive, got {n_paths}")
    seed = int(raw.get("seed", 0))

    out = Path(str(raw.get("output_dir", "runs")))
    if not out.is_absolute():
        out = base / out

    return RunConfig(
        data=tuple(rows),
        split=split,
        models=tuple(models),
        alpha_mode=alpha_mode,
        alpha_value=alpha_value,
        theta=theta,
        n_paths=n_paths,
        seed=seed,
        output_dir=str(out),
    )


def config_echo(cfg: RunConfig) -> str:
    """Canonical JSON rendering of a resolved config.

    Written into every output directory so a run can always be traced back
    to the exact inputs that produced it. Key order is fixed, so reruns of
    the same config produce identical bytes.
    """
    doc = {
        "data": {pop: {} for pop, _, _ in cfg.data},
        "split": {
            "train": list(cfg.split.train),
            "validation": list(cfg.split.validation),
            "test": list(cfg.split.test),
        },
        "models": list(cfg.models),
        "alpha_mode": cfg.alpha_mode,
        "alpha_value": cfg.alpha_value,
        "theta": cfg.theta,
        "n_paths": cfg.n_paths,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
    }
    for pop, g, p in cfg.data:
        doc["data"][pop][GENDER_LABELS[g]] = p
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
