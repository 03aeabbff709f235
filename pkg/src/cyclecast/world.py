"""Nature run: a toy global atmosphere with known, tunable dynamics.

Hourly stepping: semi-Lagrangian zonal advection of z/t/r by a prescribed
per-level wind, zonal diffusion, relaxation toward a seasonally varying zonal
base state, seeded stochastic forcing, humidity clamped to [0, 100]. Winds are
diagnosed from horizontal z differences with equatorial damping, never
prognosed; surface fields relax toward analogs of the lowest level.

Diffusion acts only along longitude so that the (zonally symmetric) base state
is an exact fixed point of the unforced dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec
from .state import StateCube

_MEAN_COS = 2.0 / np.pi  # mean of cos(lat) over a sphere's cell rows, roughly


@dataclass(frozen=True)
class WorldParams:
    grid: GridSpec
    seed: int
    year_days: float = 12.0
    u_cells_per_hour: tuple = (1.5, 1.2, 0.9, 0.6, 0.3)
    cos_lat_wind: bool = True
    kappa: float = 0.08           # zonal diffusion, cell^2 per hour
    relax_rate: float = 0.02      # per hour, toward seasonal base
    seasonal_amp: float = 1.0     # scales all *_season terms
    forcing_amp_t: float = 0.30   # K per hour step, after smoothing
    forcing_amp_z: float = 2.5
    forcing_amp_r: float = 2.0
    forcing_smooth: int = 2       # smoothing passes of a 1-2-1 kernel
    # base-state shape
    t_ref_top: float = 215.0
    t_ref_bot: float = 285.0
    t_grad: float = 28.0
    t_season: float = 8.0
    z_ref_top: float = 9000.0
    z_ref_bot: float = 1000.0
    z_grad: float = 500.0
    z_season: float = 60.0
    r_ref: float = 55.0
    r_grad: float = 22.0
    r_season: float = 14.0
    # diagnostics and surface couplings
    geos_coef: float = 0.15
    geos_v_frac: float = 0.3
    eq_damp: float = 0.35
    sfc_relax: float = 0.2
    msl_ref: float = 1013.0
    msl_coef: float = 0.05
    tp_coef: float = 0.12
    dt_hours: float = 1.0


def desk_params(seed: int, grid: GridSpec | None = None, **kw) -> WorldParams:
    if grid is None:
        grid = GridSpec(32, 64, (100.0, 300.0, 500.0, 700.0, 900.0))
    u = kw.pop("u_cells_per_hour", None)
    if u is None:
        # faster aloft, slower near the surface
        u = tuple(np.linspace(1.5, 0.3, grid.n_levels))
    return WorldParams(grid=grid, seed=seed, u_cells_per_hour=u, **kw)


def _season(p: WorldParams, time_h: float) -> float:
    doy = (time_h / 24.0) % p.year_days
    return p.seasonal_amp * np.sin(2.0 * np.pi * doy / p.year_days)


def _level_frac(p: WorldParams) -> np.ndarray:
    lv = np.asarray(p.grid.levels)
    return (lv - lv[0]) / (lv[-1] - lv[0]) if len(lv) > 1 else np.zeros(1)


def base_state(p: WorldParams, time_h: float) -> StateCube:
    """Zonally symmetric seasonal base state; winds diagnosed, never free."""
    g = p.grid
    s = StateCube.zeros(g, time_h)
    phi = np.deg2rad(g.lats)
    cosl = np.cos(phi)[None, :, None]
    sinl = np.sin(phi)[None, :, None]
    xl = _level_frac(p)[:, None, None]
    sea = _season(p, time_h)

    t = (p.t_ref_top + (p.t_ref_bot - p.t_ref_top) * xl
         + p.t_grad * (cosl - _MEAN_COS) + p.t_season * sea * sinl)
    z = (p.z_ref_bot + (p.z_ref_top - p.z_ref_bot) * (1.0 - xl)
         + p.z_grad * (1.0 - 0.5 * xl) * (cosl - _MEAN_COS) + p.z_season * sea * sinl)
    r = np.clip(p.r_ref + p.r_grad * (cosl - _MEAN_COS) + p.r_season * sea * sinl,
                0.0, 100.0)

    W = g.n_lon
    s.field("t")[:] = np.broadcast_to(t, (g.n_levels, g.n_lat, W))
    s.field("z")[:] = np.broadcast_to(z, (g.n_levels, g.n_lat, W))
    s.field("r")[:] = np.broadcast_to(r, (g.n_levels, g.n_lat, W))
    _diagnose_winds(s, p)
    _set_surface_targets(s, p, s)
    return s


def _advect_zonal(f: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Semi-Lagrangian zonal shift; f (L,H,W), shift (L,H) in cells per step."""
    L, H, W = f.shape
    j = np.arange(W)[None, None, :]
    pos = j - shift[:, :, None]
    j0 = np.floor(pos)
    frac = pos - j0
    j0 = j0.astype(np.int64) % W
    j1 = (j0 + 1) % W
    a = np.take_along_axis(f, j0, axis=2)
    b = np.take_along_axis(f, j1, axis=2)
    # exact copy when the shift is a whole number of cells
    return np.where(frac == 0.0, a, (1.0 - frac) * a + frac * b)


def _smooth_noise(rng: np.random.Generator, shape, passes: int) -> np.ndarray:
    x = rng.standard_normal(shape)
    for _ in range(passes):
        x = 0.25 * np.roll(x, 1, axis=-1) + 0.5 * x + 0.25 * np.roll(x, -1, axis=-1)
        xl = np.pad(x, [(1, 1) if k == x.ndim - 2 else (0, 0) for k in range(x.ndim)],
                    mode="edge")
        x = 0.25 * xl[..., :-2, :] + 0.5 * xl[..., 1:-1, :] + 0.25 * xl[..., 2:, :]
    return x


def _diagnose_winds(s: StateCube, p: WorldParams) -> None:
    g = s.grid
    z = s.field("z")
    phi = np.deg2rad(g.lats)
    dphi = np.pi / g.n_lat
    # d/dphi with phi increasing northward = decreasing row index
    dzdphi = np.empty_like(z)
    dzdphi[:, 1:-1, :] = (z[:, :-2, :] - z[:, 2:, :]) / (2.0 * dphi)
    dzdphi[:, 0, :] = (z[:, 0, :] - z[:, 1, :]) / dphi
    dzdphi[:, -1, :] = (z[:, -2, :] - z[:, -1, :]) / dphi
    dlam = 2.0 * np.pi / g.n_lon
    dzdlam = (np.roll(z, -1, axis=2) - np.roll(z, 1, axis=2)) / (2.0 * dlam)
    sinl = np.sin(phi)[None, :, None]
    damp = sinl / (sinl * sinl + p.eq_damp ** 2)
    s.field("u")[:] = -p.geos_coef * dzdphi * damp
    s.field("v")[:] = p.geos_coef * p.geos_v_frac * dzdlam * damp


def _surface_targets(p: WorldParams, s: StateCube):
    t_last = s.field("t")[-1]
    z_last = s.field("z")[-1]
    r_last = s.field("r")[-1]
    return {
        "t2m": t_last,
        "msl": p.msl_ref + p.msl_coef * (z_last - p.z_ref_bot),
        "u10": 0.7 * s.field("u")[-1],
        "v10": 0.7 * s.field("v")[-1],
        "tp": np.maximum(0.0, p.tp_coef * (r_last - 60.0)),
    }


def _set_surface_targets(s: StateCube, p: WorldParams, src: StateCube) -> None:
    for name, tgt in _surface_targets(p, src).items():
        s.field(name)[:] = tgt


def step_nature(state: StateCube, p: WorldParams, step_index: int) -> StateCube:
    """Advance one hour. Deterministic given (params, state, step_index)."""
    g = p.grid
    out = state.copy()
    out.time_h = state.time_h + p.dt_hours

    u = np.asarray(p.u_cells_per_hour, dtype=np.float64)
    if u.shape != (g.n_levels,):
        raise ValueError(f"u_cells_per_hour needs {g.n_levels} entries, got {u.shape}")
    shift = np.broadcast_to(u[:, None], (g.n_levels, g.n_lat)).copy()
    if p.cos_lat_wind:
        shift *= np.cos(np.deg2rad(g.lats))[None, :] / _MEAN_COS

    base_next = base_state(p, out.time_h)
    amps = {"z": p.forcing_amp_z, "t": p.forcing_amp_t, "r": p.forcing_amp_r}
    for k, name in enumerate(("z", "t", "r")):
        f = _advect_zonal(state.field(name), shift * p.dt_hours)
        if p.kappa:
            f = f + p.kappa * (np.roll(f, 1, axis=2) + np.roll(f, -1, axis=2) - 2.0 * f)
        if p.relax_rate:
            f = f + p.relax_rate * p.dt_hours * (base_next.field(name) - f)
        amp = amps[name]
        if amp:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=p.seed, spawn_key=(step_index, k)))
            f = f + amp * _smooth_noise(rng, f.shape, p.forcing_smooth)
        out.field(name)[:] = f
    np.clip(out.field("r"), 0.0, 100.0, out=out.field("r"))

    _diagnose_winds(out, p)
    for name, tgt in _surface_targets(p, out).items():
        cur = state.field(name)
        out.field(name)[:] = cur + p.sfc_relax * p.dt_hours * (tgt - cur)
    np.clip(out.field("tp"), 0.0, None, out=out.field("tp"))
    return out


class WorldRun:
    """An hourly nature-run trajectory held as float32 snapshots."""

    def __init__(self, params: WorldParams, states: dict):
        self.params = params
        self._states = states  # int hour -> (C,H,W) float32

    @classmethod
    def generate(cls, params: WorldParams, t_start: float, t_end: float) -> "WorldRun":
        if t_start != int(t_start) or t_end != int(t_end) or t_end < t_start:
            raise ValueError(f"need integer hour range, got [{t_start}, {t_end}]")
        s = base_state(params, float(t_start))
        states = {int(t_start): s.data.astype(np.float32)}
        t = int(t_start)
        while t < int(t_end):
            s = step_nature(s, params, step_index=t)
            t += 1
            states[t] = s.data.astype(np.float32)
        return cls(params, states)

    @property
    def t_start(self):
        return min(self._states)

    @property
    def t_end(self):
        return max(self._states)

    def get_state(self, time_h: float) -> StateCube:
        if time_h != int(time_h) or int(time_h) not in self._states:
            raise KeyError(f"no stored state at t={time_h}h "
                           f"(run covers [{self.t_start}, {self.t_end}] hourly)")
        return StateCube(self.params.grid,
                         self._states[int(time_h)].astype(np.float64), float(time_h))
