"""Global lat/lon grid with cell centers offset half a cell from the poles."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    n_lat: int
    n_lon: int
    levels: tuple  # pressure levels in hPa, strictly increasing (top to bottom)

    def __post_init__(self):
        if self.n_lat < 2:
            raise ValueError(f"n_lat must be >= 2, got {self.n_lat}")
        if self.n_lon < 2 or self.n_lon % 2:
            raise ValueError(f"n_lon must be even and >= 2, got {self.n_lon}")
        levels = tuple(float(p) for p in self.levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must strictly increase, got {levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def n_levels(self):
        return len(self.levels)

    @cached_property
    def lats(self) -> np.ndarray:
        """Cell-center latitudes, strictly decreasing north to south."""
        d = 180.0 / self.n_lat
        return 90.0 - d * (np.arange(self.n_lat) + 0.5)

    @cached_property
    def lons(self) -> np.ndarray:
        d = 360.0 / self.n_lon
        return -180.0 + d * (np.arange(self.n_lon) + 0.5)

    def lat_weights(self) -> np.ndarray:
        """Latitude weights a_i = H * cos(phi_i) / sum_j cos(phi_j); mean is 1."""
        c = np.cos(np.deg2rad(self.lats))
        return self.n_lat * c / c.sum()

    def cell_of(self, lat, lon):
        """Nearest cell (row, col) for arrays of degrees; lon wraps periodically."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        i = np.clip(np.floor((90.0 - lat) / (180.0 / self.n_lat)).astype(np.int64),
                    0, self.n_lat - 1)
        j = np.floor((lon + 180.0) / (360.0 / self.n_lon)).astype(np.int64) % self.n_lon
        return i, j

    def flat_index(self, i, j):
        return i * self.n_lon + j

    def to_dict(self):
        return {"n_lat": self.n_lat, "n_lon": self.n_lon,
                "levels": list(self.levels)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_lat"]), int(d["n_lon"]), tuple(d["levels"]))
