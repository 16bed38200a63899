"""Age-by-year mortality surfaces and the plumbing around them.

A surface holds central death rates m_{x,t} (and, when available, the death
counts D_{x,t} and central exposures E_{x,t} they derive from) on a grid of
consecutive single ages by consecutive calendar years, for one population and
gender. Everything downstream (model fitting, forecasting, scoring) consumes
this one type.

Two on-disk formats are understood:

* the HMD 1x1 text layout (a title line, a header line, then
  ``Year  Age  Female  Male  Total`` rows, with ``110+`` style age tokens and
  ``.`` for missing values), and
* a plain CSV fixture with header ``age,year,deaths,exposure`` so the test
  suite can run without licensed data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_AGE = 100

_RATE_TOL = 1e-10  # relative tolerance for m == D/E consistency


class SurfaceError(ValueError):
    """Raised for malformed input data or invalid surface requests."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MortalitySurface:
    """Central mortality rates on an age x year grid.

    Parameters
    ----------
    ages : array of int
        Consecutive single ages, increasing by 1. The canonical grid is
        0..100; reduced grids are accepted for fixtures and experiments.
    years : array of int
        Consecutive calendar years, increasing by 1.
    rates : (n_ages, n_years) array
        Central death rates m_{x,t}, strictly positive.
    deaths, exposures : optional (n_ages, n_years) arrays
        Death counts and central exposures. Either both or neither should be
        given; when both are present, rates must equal deaths/exposures to
        within 1e-10 relative.
    gender : {"F", "M"}
    population_id : str
        Free-form label, e.g. an HMD country code.
    """

    ages: np.ndarray
    years: np.ndarray
    rates: np.ndarray
    deaths: np.ndarray | None = None
    exposures: np.ndarray | None = None
    gender: str = "F"
    population_id: str = ""

    def __post_init__(self):
        ages = np.asarray(self.ages, dtype=int)
        years = np.asarray(self.years, dtype=int)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "years", years)
        object.__setattr__(self, "rates", _readonly(self.rates))
        if self.deaths is not None:
            object.__setattr__(self, "deaths", _readonly(self.deaths))
        if self.exposures is not None:
            object.__setattr__(self, "exposures", _readonly(self.exposures))
        self._validate()

    def _validate(self):
        if self.gender not in ("F", "M"):
            raise SurfaceError(f"gender must be 'F' or 'M', got {self.gender!r}")
        if self.ages.ndim != 1 or len(self.ages) == 0:
            raise SurfaceError("ages must be a nonempty 1-d array")
        if np.any(np.diff(self.ages) != 1):
            raise SurfaceError("ages must increase by exactly 1")
        if self.ages[0] < 0 or self.ages[-1] > MAX_AGE:
            raise SurfaceError(f"ages must lie within 0..{MAX_AGE}")
        if np.any(np.diff(self.years) != 1):
            raise SurfaceError("years must increase by exactly 1")
        shape = (len(self.ages), len(self.years))
        if self.rates.shape != shape:
            raise SurfaceError(
                f"rates shape {self.rates.shape} does not match grid {shape}"
            )
        if not np.all(np.isfinite(self.rates)) or np.any(self.rates <= 0):
            raise SurfaceError(
                "rates must be finite and strictly positive; "
                "repair zero cells before constructing the surface"
            )
        for name, mat in (("deaths", self.deaths), ("exposures", self.exposures)):
            if mat is not None and mat.shape != shape:
                raise SurfaceError(f"{name} shape {mat.shape} != grid {shape}")
        if self.deaths is not None and np.any(self.deaths < 0):
            raise SurfaceError("deaths must be nonnegative")
        if self.exposures is not None and np.any(self.exposures <= 0):
            raise SurfaceError("exposures must be strictly positive")
        if self.deaths is not None and self.exposures is not None:
            implied = self.deaths / self.exposures
            if np.any(np.abs(self.rates - implied) > _RATE_TOL * self.rates):
                worst = np.unravel_index(
                    np.argmax(np.abs(self.rates - implied) / self.rates),
                    self.rates.shape,
                )
                raise SurfaceError(
                    "rates inconsistent with deaths/exposures at "
                    f"age {self.ages[worst[0]]}, year {self.years[worst[1]]}"
                )

    # -- convenience ------------------------------------------------------

    @property
    def n_ages(self) -> int:
        return len(self.ages)

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def log_rates(self) -> np.ndarray:
        return np.log(self.rates)

    def year_index(self, year: int) -> int:
        if year < self.years[0] or year > self.years[-1]:
            raise SurfaceError(f"year {year} outside {self.years[0]}..{self.years[-1]}")
        return int(year - self.years[0])

    def age_index(self, age: int) -> int:
        if age < self.ages[0] or age > self.ages[-1]:
            raise SurfaceError(f"age {age} outside {self.ages[0]}..{self.ages[-1]}")
        return int(age - self.ages[0])

    def require_exposures(self, context: str) -> np.ndarray:
        if self.exposures is None:
            raise SurfaceError(
                f"{context} requires exposures, but surface "
                f"{self.population_id or '<unnamed>'} carries rates only"
            )
        return self.exposures

    def require_deaths(self, context: str) -> np.ndarray:
        if self.deaths is None:
            raise SurfaceError(
                f"{context} requires death counts, but surface "
                f"{self.population_id or '<unnamed>'} carries rates only"
            )
        return self.deaths

    def subset_years(self, first: int, last: int) -> "MortalitySurface":
        """Restrict to the year window [first, last], ages untouched."""
        if first > last:
            raise SurfaceError(f"empty year window {first}..{last}")
        i0 = self.year_index(first)
        i1 = self.year_index(last) + 1
        return MortalitySurface(
            ages=self.ages,
            years=self.years[i0:i1],
            rates=self.rates[:, i0:i1],
            deaths=None if self.deaths is None else self.deaths[:, i0:i1],
            exposures=None if self.exposures is None else self.exposures[:, i0:i1],
            gender=self.gender,
            population_id=self.population_id,
        )

    def subset_ages(self, first: int, last: int) -> "MortalitySurface":
        """Restrict to the age band [first, last], years untouched."""
        if first > last:
            raise SurfaceError(f"empty age band {first}..{last}")
        i0 = self.age_index(first)
        i1 = self.age_index(last) + 1
        return MortalitySurface(
            ages=self.ages[i0:i1],
            years=self.years,
            rates=self.rates[i0:i1],
            deaths=None if self.deaths is None else self.deaths[i0:i1],
            exposures=None if self.exposures is None else self.exposures[i0:i1],
            gender=self.gender,
            population_id=self.population_id,
        )


@dataclass(frozen=True)
class SplitConfig:
    """Train / validation / test year windows (inclusive endpoints).

    The three windows must be disjoint, internally contiguous, adjacent to
    each other, and ordered train < validation < test. The default mirrors a
    60-year series split 40/10/10.
    """

    train: tuple[int, int] = (1960, 1999)
    validation: tuple[int, int] = (2000, 2009)
    test: tuple[int, int] = (2010, 2019)

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise SurfaceError(f"{name} window {lo}..{hi} is empty")
        if self.train[1] + 1 != self.validation[0]:
            raise SurfaceError("validation window must start right after train")
        if self.validation[1] + 1 != self.test[0]:
            raise SurfaceError("test window must start right after validation")

    @property
    def validation_width(self) -> int:
        return self.validation[1] - self.validation[0] + 1

    @property
    def test_width(self) -> int:
        return self.test[1] - self.test[0] + 1


def split(
    surface: MortalitySurface, cfg: SplitConfig
) -> tuple[MortalitySurface, MortalitySurface, MortalitySurface]:
    """Partition the year axis into train / validation / test surfaces."""
    for name, (lo, hi) in (
        ("train", cfg.train),
        ("validation", cfg.validation),
        ("test", cfg.test),
    ):
        if lo < surface.years[0] or hi > surface.years[-1]:
            raise SurfaceError(
                f"{name} window {lo}..{hi} outside data years "
                f"{surface.years[0]}..{surface.years[-1]}"
            )
    return (
        surface.subset_years(*cfg.train),
        surface.subset_years(*cfg.validation),
        surface.subset_years(*cfg.test),
    )


# ---------------------------------------------------------------------------
# zero-cell repair
# ---------------------------------------------------------------------------

def repair_rates(
    rates: np.ndarray,
    exposures: np.ndarray | None = None,
    deaths: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Replace zero/NaN rate cells so that log transforms are defined.

    A bad cell takes the minimum positive rate observed in its own age row.
    When exposures are available, the implied death count m * E is written
    back for the repaired cells (only those) so the D/E identity keeps
    holding; untouched cells keep their original deaths.

    Returns the repaired rate matrix and the updated death matrix (None when
    no exposures were given). Raises if an entire age row has no positive
    rate to borrow from.
    """
    m = np.array(rates, dtype=float)
    bad = ~np.isfinite(m) | (m <= 0)
    if bad.any():
        for i in np.flatnonzero(bad.any(axis=1)):
            row = m[i]
            good = row[np.isfinite(row) & (row > 0)]
            if good.size == 0:
                raise SurfaceError(
                    f"age row {i} has no positive rate; cannot repair"
                )
            row[bad[i]] = good.min()
    if exposures is None:
        return m, None
    if deaths is None:
        deaths = m * exposures
    else:
        deaths = np.where(bad, m * exposures, deaths)
    return m, deaths


# ---------------------------------------------------------------------------
# HMD 1x1 text layout
# ---------------------------------------------------------------------------

def _parse_age_token(tok: str) -> int:
    # "110+" style open-age tokens count as their numeric part
    return int(tok.rstrip("+"))


def _parse_hmd_matrix(path: str | Path, gender: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one HMD 1x1 file into (years, ages 0..100 matrix) for a gender.

    Missing cells (".") come back as NaN for the caller to repair.
    """
    col = {"F": 2, "M": 3}[gender]
    per_year: dict[int, dict[int, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if len(parts) < 5 or not parts[0].isdigit():
                continue  # title, header, or blank line
            year = int(parts[0])
            try:
                age = _parse_age_token(parts[1])
            except ValueError:
                raise SurfaceError(
                    f"{path}: unreadable age token {parts[1]!r} on line {lineno}"
                ) from None
            if age > MAX_AGE:
                continue
            tok = parts[col]
            if tok == ".":
                val = np.nan
            else:
                try:
                    val = float(tok)
                except ValueError:
                    raise SurfaceError(
                        f"{path}: non-numeric cell {tok!r} on line {lineno}, "
                        f"column {col + 1}"
                    ) from None
            per_year.setdefault(year, {})[age] = val
    if not per_year:
        raise SurfaceError(f"{path}: no data rows found")
    years = np.array(sorted(per_year), dtype=int)
    gaps = [int(y) for y in range(years[0], years[-1] + 1) if int(y) not in per_year]
    if gaps:
        raise SurfaceError(f"{path}: gap at {gaps[0]}")
    ages = np.arange(0, MAX_AGE + 1)
    mat = np.full((len(ages), len(years)), np.nan)
    for j, year in enumerate(years):
        row = per_year[int(year)]
        for age, val in row.items():
            mat[age, j] = val
    return years, mat


def _window(years: np.ndarray, mat: np.ndarray, want: tuple[int, int] | None):
    if want is None:
        return years, mat
    lo, hi = want
    missing = [y for y in range(lo, hi + 1) if y < years[0] or y > years[-1]]
    if missing:
        raise SurfaceError(f"gap at {missing[0]}")
    i0 = int(lo - years[0])
    i1 = int(hi - years[0]) + 1
    return years[i0:i1], mat[:, i0:i1]


def load_hmd_surface(
    gender: str,
    mx: str | Path | None = None,
    deaths: str | Path | None = None,
    exposures: str | Path | None = None,
    years: tuple[int, int] | None = None,
    population_id: str = "",
) -> MortalitySurface:
    """Assemble a surface from HMD 1x1 files.

    Give either an Mx file (rates only) or deaths plus exposures (rates are
    computed as D/E). When all three are named the counts win: published Mx
    values are rounded and would disagree with D/E at full precision, so the
    Mx file is only used to check year coverage. Zero and missing cells are
    repaired row-wise before construction.
    """
    if mx is None and (deaths is None or exposures is None):
        raise SurfaceError(
            "need an Mx file, or a deaths file together with an exposures file"
        )
    d_mat = e_mat = None
    yrs = None
    if deaths is not None:
        yrs, d_mat = _window(*_parse_hmd_matrix(deaths, gender), years)
        d_mat = np.nan_to_num(d_mat, nan=0.0)
    if exposures is not None:
        y2, e_mat = _window(*_parse_hmd_matrix(exposures, gender), years)
        if yrs is not None and not np.array_equal(yrs, y2):
            raise SurfaceError("deaths and exposures files cover different years")
        yrs = y2
        # zero exposure cannot support a rate; treat as missing and give it
        # a token person-year so the implied death count stays zero
        e_mat = np.where(np.isfinite(e_mat) & (e_mat > 0), e_mat, 1.0)
    if mx is not None:
        y3, m_mat = _window(*_parse_hmd_matrix(mx, gender), years)
        if yrs is not None and not np.array_equal(yrs, y3):
            raise SurfaceError("Mx file covers different years than counts files")
        yrs = y3
    if e_mat is not None:
        m_mat = d_mat / e_mat
    m_mat, d_mat = repair_rates(m_mat, e_mat, d_mat)
    return MortalitySurface(
        ages=np.arange(0, MAX_AGE + 1),
        years=yrs,
        rates=m_mat,
        deaths=d_mat,
        exposures=e_mat,
        gender=gender,
        population_id=population_id,
    )


# ---------------------------------------------------------------------------
# fixture CSV  (header: age,year,deaths,exposure)
# ---------------------------------------------------------------------------

def _load_fixture_csv(
    path: str | Path, gender: str, years: tuple[int, int] | None, population_id: str
) -> MortalitySurface:
    rows: list[tuple[int, int, float, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:4]] != [
            "age",
            "year",
            "deaths",
            "exposure",
        ]:
            raise SurfaceError(f"{path}: expected header age,year,deaths,exposure")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3])))
            except (ValueError, IndexError):
                raise SurfaceError(f"{path}: unreadable row {lineno}") from None
    if not rows:
        raise SurfaceError(f"{path}: no data rows")
    age_set = sorted({r[0] for r in rows})
    year_set = sorted({r[1] for r in rows})
    gaps = [y for y in range(year_set[0], year_set[-1] + 1) if y not in set(year_set)]
    if gaps:
        raise SurfaceError(f"{path}: gap at {gaps[0]}")
    ages = np.array(age_set, dtype=int)
    yrs = np.array(year_set, dtype=int)
    d = np.full((len(ages), len(yrs)), np.nan)
    e = np.full((len(ages), len(yrs)), np.nan)
    a_pos = {a: i for i, a in enumerate(age_set)}
    y_pos = {y: j for j, y in enumerate(year_set)}
    for age, year, dx, ex in rows:
        d[a_pos[age], y_pos[year]] = dx
        e[a_pos[age], y_pos[year]] = ex
    if np.isnan(d).any() or np.isnan(e).any():
        i, j = np.argwhere(np.isnan(d) | np.isnan(e))[0]
        raise SurfaceError(
            f"{path}: missing cell at age {ages[i]}, year {yrs[j]}"
        )
    yrs, d = _window(yrs, d, years)
    _, e = _window(np.array(year_set), e, years)
    m, d = repair_rates(d / e, e, d)
    return MortalitySurface(
        ages=ages,
        years=yrs,
        rates=m,
        deaths=d,
        exposures=e,
        gender=gender,
        population_id=population_id or Path(path).stem,
    )


def load_surface(
    path: str | Path,
    gender: str,
    years: tuple[int, int] | None = None,
    population_id: str = "",
) -> MortalitySurface:
    """Load a surface from a single file, sniffing the format.

    A file whose first line starts with ``age,year`` is read as the CSV
    fixture format (deaths and exposures; rates derived). Anything else is
    parsed as an HMD 1x1 rates file, which yields a rates-only surface.
    """
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.lstrip().lower().startswith("age,year"):
        return _load_fixture_csv(path, gender, years, population_id)
    return load_hmd_surface(
        gender, mx=path, years=years, population_id=population_id or Path(path).stem
    )


def write_surface(surface: MortalitySurface, path: str | Path) -> None:
    """Write a surface as the CSV fixture format.

    When the surface carries no deaths/exposures, unit exposures are written
    so that deaths equal the rates exactly and a reload reproduces them.
    """
    d = surface.deaths
    e = surface.exposures
    if d is None or e is None:
        e = np.ones_like(surface.rates)
        d = surface.rates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["age", "year", "deaths", "exposure"])
        for i, age in enumerate(surface.ages):
            for j, year in enumerate(surface.years):
                writer.writerow([age, year, f"{d[i, j]:.17g}", f"{e[i, j]:.17g}"])
