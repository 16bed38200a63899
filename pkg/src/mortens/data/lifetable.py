"""Period life tables from central death rates.

A life table converts one year's age schedule of central death rates m_x
into death probabilities, a survival curve from a unit radix, and remaining
life expectancies. Only period tables are supported: the schedule is read as
if a synthetic cohort lived through it.

Conventions
-----------
* q_x = m_x / (1 + (1 - a_x) m_x) with a_x = 0.5 for all ages except age 0,
  where a_0 = 0.1 reflects the concentration of infant deaths early in the
  first year of life.
* The last age of the grid is the closure age. Everyone alive there dies
  within it (q = 1) under a constant hazard m, so the person-years lived in
  the closure year are l * (1 - exp(-m)) / m and the remaining expectancy at
  closure is (1 - exp(-m)) / m, which is at most one year. Closing the table
  this way keeps e_0 bounded by the grid length plus one even when the final
  rate is tiny.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LifeTable", "life_table"]


@dataclass(frozen=True)
class LifeTable:
    """Single-year period life table.

    Attributes
    ----------
    ages : ndarray of int
        Contiguous age grid, one entry per row of the table.
    m_x : ndarray
        Central death rates the table was built from.
    q_x : ndarray
        Probability of dying within the year given survival to age x.
        The closure age has q = 1.
    l_x : ndarray
        Survivors at exact age x from a radix of 1.0.
    e_x : ndarray
        Remaining life expectancy in years at exact age x.
    """

    ages: np.ndarray
    m_x: np.ndarray
    q_x: np.ndarray
    l_x: np.ndarray
    e_x: np.ndarray

    @property
    def e0(self) -> float:
        """Life expectancy at the first age of the grid."""
        return float(self.e_x[0])


def life_table(m_x: np.ndarray, ages: np.ndarray | None = None) -> LifeTable:
    """Build a period life table from central death rates.

    Parameters
    ----------
    m_x : array_like
        Positive central death rates, one per age, ordered by age.
    ages : array_like of int, optional
        Contiguous age grid matching ``m_x``. Defaults to 0..len(m_x)-1.
        The infant separation factor a_0 = 0.1 is applied only when the
        grid actually starts at age 0.

    Returns
    -------
    LifeTable

    Raises
    ------
    ValueError
        If any rate is non-positive or not finite, or the grid does not
        line up with the rates.
    """
    m = np.asarray(m_x, dtype=float).ravel()
    if m.size == 0:
        raise ValueError("empty rate vector")
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        bad = int(np.flatnonzero(~np.isfinite(m) | (m <= 0))[0])
        raise ValueError(f"non-positive rate at position {bad}: m={m[bad]!r}")
    if ages is None:
        ages = np.arange(m.size)
    else:
        ages = np.asarray(ages, dtype=int).ravel()
        if ages.size != m.size:
            raise ValueError("ages and m_x have different lengths")
        if ages.size > 1 and not np.array_equal(np.diff(ages), np.ones(ages.size - 1)):
            raise ValueError("ages must be consecutive")

    n = m.size
    a = np.full(n, 0.5)
    if ages[0] == 0:
        a[0] = 0.1

    q = m / (1.0 + (1.0 - a) * m)
    q[-1] = 1.0

    l = np.empty(n)
    l[0] = 1.0
    for i in range(n - 1):
        l[i + 1] = l[i] * (1.0 - q[i])

    d = l * q
    # person-years: those surviving the year contribute 1, deaths a_x of it;
    # the open closure group lives (1 - exp(-m))/m of its final year
    L = np.empty(n)
    L[:-1] = l[:-1] - (1.0 - a[:-1]) * d[:-1]
    L[-1] = l[-1] * (1.0 - np.exp(-m[-1])) / m[-1]

    T = np.cumsum(L[::-1])[::-1]
    e = T / l

    cols = (np.array(ages), m.copy(), q, l, e)
    for arr in cols:
        arr.setflags(write=False)
    return LifeTable(*cols)
