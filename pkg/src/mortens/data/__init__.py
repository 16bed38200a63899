"""Mortality surfaces: loading, validation, splitting, life tables, synthesis."""

from mortens.data.surface import (
    MortalitySurface,
    SplitConfig,
    SurfaceError,
    load_surface,
    load_hmd_surface,
    write_surface,
    split,
)
from mortens.data.lifetable import LifeTable, life_table
from mortens.data.synthetic import synthesize_surface, GENERATORS

__all__ = [
    "MortalitySurface",
    "SplitConfig",
    "SurfaceError",
    "load_surface",
    "load_hmd_surface",
    "write_surface",
    "split",
    "LifeTable",
    "life_table",
    "synthesize_surface",
    "GENERATORS",
]
