"""State cubes: the full model state as one (C, H, W) array.

Channel layout: five upper-air fields (z, t, u, v, r), each on L pressure
levels ordered top to bottom, followed by five surface fields. Humidity r is
a relative humidity in percent, clamped to [0, 100] by the nature run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec

UPPER_FIELDS = ("z", "t", "u", "v", "r")
SURFACE_FIELDS = ("t2m", "msl", "u10", "v10", "tp")


def n_channels(grid: GridSpec) -> int:
    return len(UPPER_FIELDS) * grid.n_levels + len(SURFACE_FIELDS)


def channel_names(grid: GridSpec):
    names = [f"{f}@{int(p)}" for f in UPPER_FIELDS for p in grid.levels]
    names += list(SURFACE_FIELDS)
    return names


def channel_var_level(grid: GridSpec, c: int):
    """(variable, level) of channel c; surface channels report level 0."""
    L = grid.n_levels
    nu = len(UPPER_FIELDS) * L
    if c < nu:
        return UPPER_FIELDS[c // L], int(grid.levels[c % L])
    return SURFACE_FIELDS[c - nu], 0


@dataclass
class StateCube:
    grid: GridSpec
    data: np.ndarray  # (C, H, W) float64
    time_h: float

    @classmethod
    def zeros(cls, grid: GridSpec, time_h: float):
        return cls(grid, np.zeros((n_channels(grid), grid.n_lat, grid.n_lon)), time_h)

    def field(self, name: str) -> np.ndarray:
        """Mutable view: (L, H, W) for upper-air fields, (H, W) for surface."""
        L = self.grid.n_levels
        if name in UPPER_FIELDS:
            k = UPPER_FIELDS.index(name)
            return self.data[k * L:(k + 1) * L]
        if name in SURFACE_FIELDS:
            return self.data[len(UPPER_FIELDS) * L + SURFACE_FIELDS.index(name)]
        raise KeyError(f"unknown field {name!r}")

    def copy(self):
        return StateCube(self.grid, self.data.copy(), self.time_h)


class StateNorm:
    """Frozen per-channel mean/std for z-scoring model states.

    Statistics come from a training period of the synthetic world and are
    stored with checkpoints so later runs reuse the exact same scaling.
    """

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D channel vectors")
        bad = np.nonzero(self.std <= 0.0)[0]
        if bad.size:
            raise ValueError(f"non-positive spread for channel {int(bad[0])}")

    @classmethod
    def from_samples(cls, cubes):
        """Fit over an iterable of StateCubes (channel stats pooled over
        space and time)."""
        stack = np.stack([c.data for c in cubes])
        return cls(stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3)))

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return data * self.std[:, None, None] + self.mean[:, None, None]

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean],
                "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])
