"""Synthetic observing system: polar orbiters with cross-track sounders,
sparse radio-occultation profiles, and an outage/bias schedule.

Radiances are linear in the state by construction (plus optional noise):
    BT_c = sum_l w_c(l) T(l) - gamma_c * sum_l v_c(l) R(l) + b0 + b1*theta^2 + eps
with Gaussian, unit-sum weighting functions w_c, v_c over model levels.
Humidity channels have gamma_c > 0, so more humidity means a colder BT.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec
from .state import StateCube
from .world import WorldRun

WINDOW_BEFORE_H = 3   # frames t0-3 .. t0+4, hourly
WINDOW_AFTER_H = 4
N_FRAMES = WINDOW_BEFORE_H + WINDOW_AFTER_H + 1


def window_frames(t0: float):
    """The 8 hourly frame times of the assimilation window centered near t0."""
    if t0 != int(t0):
        raise ValueError(f"analysis time must be a whole hour, got {t0}")
    return [int(t0) + k for k in range(-WINDOW_BEFORE_H, WINDOW_AFTER_H + 1)]


# ---- Orbits ----

@dataclass(frozen=True)
class OrbitSpec:
    lst_hours: float          # local solar time of the ascending node
    period_min: float = 100.0
    incl_deg: float = 98.0
    phase0: float = 0.0       # orbital phase at t=0, radians


def track_point(orbit: OrbitSpec, t_h):
    """Sub-satellite (lat, lon) in degrees at hours t_h (scalar or array)."""
    t_h = np.asarray(t_h, dtype=np.float64)
    u = orbit.phase0 + 2.0 * np.pi * (t_h * 60.0) / orbit.period_min
    incl = np.deg2rad(orbit.incl_deg)
    lat = np.rad2deg(np.arcsin(np.sin(incl) * np.sin(u)))
    # sun-synchronous by construction: the ascending node sits where local
    # solar time equals lst_hours, i.e. it drifts 15 deg westward per hour UTC
    lon_node = (orbit.lst_hours - t_h) * 15.0
    xi = np.rad2deg(np.arctan2(np.cos(incl) * np.sin(u), np.cos(u)))
    lon = (lon_node + xi + 180.0) % 360.0 - 180.0
    return lat, lon


# ---- Instruments ----

@dataclass(frozen=True)
class ChannelSpec:
    target: str        # "t" or "r"
    peak_level: int    # level index the weighting function peaks at
    width: float       # Gaussian width in level-index units
    gamma: float       # humidity sensitivity; 0 for pure temperature channels
    t_width: float = 1.6  # width of the broad temperature contribution


@dataclass(frozen=True)
class InstrumentSpec:
    inst_id: str
    orbit: OrbitSpec
    channels: tuple
    swath_half_width: int   # cells either side of the track
    scan_max_deg: float
    noise_k: float
    bias_b0: float
    bias_b1: float          # K per deg^2 of scan angle
    track_step_min: float = 1.5


def _unit_gaussian(n_levels: int, peak: int, width: float) -> np.ndarray:
    x = np.arange(n_levels, dtype=np.float64)
    w = np.exp(-0.5 * ((x - peak) / width) ** 2)
    return w / w.sum()


def weighting_matrices(inst: InstrumentSpec, n_levels: int):
    """(C, L) temperature weights and humidity weights for an instrument."""
    wt = np.stack([_unit_gaussian(n_levels, c.peak_level, c.t_width if c.gamma else c.width)
                   for c in inst.channels])
    wv = np.stack([_unit_gaussian(n_levels, c.peak_level, c.width) for c in inst.channels])
    return wt, wv


def brightness_temperature(inst: InstrumentSpec, state: StateCube, rows, cols,
                           scan_deg, noise=True, rng=None):
    """BT (n, C) for grid columns (rows, cols) at scan angles scan_deg."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    scan = np.asarray(scan_deg, dtype=np.float64)
    L = state.grid.n_levels
    wt, wv = weighting_matrices(inst, L)
    t_cols = state.field("t")[:, rows, cols]       # (L, n)
    r_cols = state.field("r")[:, rows, cols]
    gam = np.array([c.gamma for c in inst.channels])
    bt = (wt @ t_cols).T - gam[None, :] * (wv @ r_cols).T
    bt = bt + inst.bias_b0 + inst.bias_b1 * scan[:, None] ** 2
    if noise:
        if rng is None:
            raise ValueError("noise requested without an rng")
        bt = bt + inst.noise_k * rng.standard_normal(bt.shape)
    return bt


# ---- Outage / bias schedule ----

@dataclass
class OutageSchedule:
    """Per-instrument drop intervals and step-bias intervals, hours."""
    outages: dict = field(default_factory=dict)   # id -> [(t0, t1)]
    biases: dict = field(default_factory=dict)    # id -> [(t0, t1, bias_k)]

    def keep_mask(self, inst_id: str, times: np.ndarray) -> np.ndarray:
        keep = np.ones(times.shape[0], dtype=bool)
        for a, b in self.outages.get(inst_id, ()):
            keep &= ~((times >= a) & (times < b))
        return keep

    def bias_at(self, inst_id: str, times: np.ndarray) -> np.ndarray:
        out = np.zeros(times.shape[0])
        for a, b, val in self.biases.get(inst_id, ()):
            out += np.where((times >= a) & (times < b), val, 0.0)
        return out


# ---- Observation tables ----

@dataclass
class ObsTable:
    inst_id: str
    times: np.ndarray   # (n,) hours
    lats: np.ndarray
    lons: np.ndarray
    scans: np.ndarray
    bt: np.ndarray      # (n, C)


def _stream_rng(seed: int, inst_id: str, hour: int) -> np.random.Generator:
    key = zlib.crc32(inst_id.encode())
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(key, hour)))


def simulate_hour_block(inst: InstrumentSpec, world: WorldRun, hour: int,
                        outages: OutageSchedule | None) -> ObsTable:
    """All samples of one instrument binned to the hourly frame at `hour`.

    The track is sampled over [hour-0.5, hour+0.5); radiances use the truth
    snapshot at `hour` (the frame the samples will be assigned to).
    """
    grid = world.params.grid
    state = world.get_state(float(hour))
    rng = _stream_rng(world.params.seed, inst.inst_id, hour)

    step_h = inst.track_step_min / 60.0
    t = np.arange(hour - 0.5, hour + 0.5 - 1e-9, step_h)
    lat0, lon0 = track_point(inst.orbit, t)
    lat_eps, lon_eps = track_point(inst.orbit, t + 1e-4)
    dn = lat_eps - lat0
    de = (lon_eps - lon0 + 180.0) % 360.0 - 180.0
    de *= np.cos(np.deg2rad(lat0))
    norm = np.hypot(dn, de)
    norm[norm == 0] = 1.0
    perp_n = -de / norm
    perp_e = dn / norm

    cell_deg = 180.0 / grid.n_lat
    hw = inst.swath_half_width
    offsets = np.arange(-hw, hw + 1, dtype=np.float64)
    lat_s = lat0[:, None] + perp_n[:, None] * offsets[None, :] * cell_deg
    coslat = np.maximum(np.cos(np.deg2rad(lat0)), 0.2)
    lon_s = lon0[:, None] + (perp_e / coslat)[:, None] * offsets[None, :] * cell_deg
    scan = np.broadcast_to(offsets[None, :] / max(hw, 1) * inst.scan_max_deg, lat_s.shape)
    times = np.broadcast_to(t[:, None], lat_s.shape)

    lat_f = np.clip(lat_s.ravel(), -90.0, 90.0)
    lon_f = (lon_s.ravel() + 180.0) % 360.0 - 180.0
    scan_f = np.abs(scan.ravel()) * np.sign(scan.ravel())
    time_f = times.ravel().copy()

    if outages is not None:
        keep = outages.keep_mask(inst.inst_id, time_f)
        lat_f, lon_f, scan_f, time_f = lat_f[keep], lon_f[keep], scan_f[keep], time_f[keep]

    rows, cols_ = grid.cell_of(lat_f, lon_f)
    bt = brightness_temperature(inst, state, rows, cols_, scan_f, noise=True, rng=rng)
    if outages is not None:
        bt = bt + outages.bias_at(inst.inst_id, time_f)[:, None]
    return ObsTable(inst.inst_id, time_f, lat_f, lon_f, scan_f, bt)


# ---- Radio occultation ----

@dataclass(frozen=True)
class RoParams:
    fraction_per_window: float = 0.006  # fraction of grid columns per window
    n_native_heights: int = 24
    noise_n: float = 0.3
    scale_height_km: float = 7.5
    inst_id: str = "ro"


def desk_ro_params(**kw) -> RoParams:
    return RoParams(**kw)


def refractivity(p_hpa, t_k, e_hpa):
    """N = 77.6 P/T + 3.73e5 e/T^2 (P, e in hPa, T in K)."""
    p_hpa = np.asarray(p_hpa, dtype=np.float64)
    t_k = np.asarray(t_k, dtype=np.float64)
    e_hpa = np.asarray(e_hpa, dtype=np.float64)
    return 77.6 * p_hpa / t_k + 3.73e5 * e_hpa / (t_k * t_k)


def saturation_vapor_pressure(t_k):
    """Tetens-type formula, hPa."""
    t_k = np.asarray(t_k, dtype=np.float64)
    return 6.112 * np.exp(17.67 * (t_k - 273.15) / (t_k - 29.65))


@dataclass
class ROProfiles:
    times: np.ndarray    # (n,)
    lats: np.ndarray
    lons: np.ndarray
    heights: np.ndarray  # (n, K) km, strictly increasing
    values: np.ndarray   # (n, K) refractivity


def _level_heights_km(grid: GridSpec, scale_h: float) -> np.ndarray:
    return scale_h * np.log(1000.0 / np.asarray(grid.levels))


def simulate_ro_hour(world: WorldRun, hour: int, ro: RoParams,
                     outages: OutageSchedule | None = None) -> ROProfiles:
    grid = world.params.grid
    state = world.get_state(float(hour))
    rng = _stream_rng(world.params.seed, ro.inst_id, hour)

    n_cells = grid.n_lat * grid.n_lon
    per_window = int(round(ro.fraction_per_window * n_cells))
    base, extra = divmod(per_window, N_FRAMES)
    n = base + (1 if (hour % N_FRAMES) < extra else 0)
    flat = rng.choice(n_cells, size=min(n, n_cells), replace=False)
    times = hour - 0.5 + rng.random(flat.shape[0])
    if outages is not None:
        keep = outages.keep_mask(ro.inst_id, times)
        flat, times = flat[keep], times[keep]
    rows, cols = flat // grid.n_lon, flat % grid.n_lon

    z_lev = _level_heights_km(grid, ro.scale_height_km)  # decreasing with level idx
    z_asc = z_lev[::-1]
    ladder = np.linspace(z_lev[-1], z_lev[0], ro.n_native_heights)

    t_cols = state.field("t")[:, rows, cols][::-1]   # (L, n) bottom-up
    r_cols = state.field("r")[:, rows, cols][::-1]
    t_prof = np.empty((flat.shape[0], ro.n_native_heights))
    r_prof = np.empty_like(t_prof)
    for k in range(flat.shape[0]):
        t_prof[k] = np.interp(ladder, z_asc, t_cols[:, k])
        r_prof[k] = np.interp(ladder, z_asc, r_cols[:, k])
    p_prof = 1000.0 * np.exp(-ladder / ro.scale_height_km)[None, :]
    e_prof = (np.clip(r_prof, 0.0, 100.0) / 100.0) * saturation_vapor_pressure(t_prof)
    values = refractivity(p_prof, t_prof, e_prof)
    values = values + ro.noise_n * rng.standard_normal(values.shape)
    heights = np.broadcast_to(ladder[None, :], values.shape).copy()
    return ROProfiles(times, grid.lats[rows].copy(), grid.lons[cols].copy(),
                      heights, values)


# ---- Desk observing system ----

def desk_instruments(grid: GridSpec):
    """Three cross-track sounders on morning/mid-morning/afternoon orbits.

    The widest-swath instrument (em_tsound) is the pure temperature sounder;
    am_hsound is a pure humidity sounder; pm_mixsound carries both kinds.
    """
    L = grid.n_levels
    mid = L // 2
    em = InstrumentSpec(
        inst_id="em_tsound",
        orbit=OrbitSpec(lst_hours=6.0, period_min=100.0, phase0=0.0),
        channels=tuple(ChannelSpec("t", min(k, L - 1), 0.9, 0.0)
                       for k in range(min(4, L))),
        swath_half_width=5, scan_max_deg=50.0, noise_k=0.20,
        bias_b0=0.3, bias_b1=2e-4)
    am = InstrumentSpec(
        inst_id="am_hsound",
        orbit=OrbitSpec(lst_hours=10.0, period_min=102.0, phase0=2.1),
        channels=tuple(ChannelSpec("r", min(mid + k - 1, L - 1), 0.8, 0.45 + 0.05 * k)
                       for k in range(3)),
        swath_half_width=3, scan_max_deg=45.0, noise_k=0.25,
        bias_b0=-0.2, bias_b1=1.5e-4)
    pm = InstrumentSpec(
        inst_id="pm_mixsound",
        orbit=OrbitSpec(lst_hours=14.0, period_min=98.0, phase0=4.2),
        channels=(ChannelSpec("t", 1 % L, 0.9, 0.0),
                  ChannelSpec("t", min(3, L - 1), 0.9, 0.0),
                  ChannelSpec("r", mid, 0.8, 0.5),
                  ChannelSpec("r", min(mid + 1, L - 1), 0.8, 0.55)),
        swath_half_width=4, scan_max_deg=50.0, noise_k=0.25,
        bias_b0=0.1, bias_b1=1e-4)
    return [em, am, pm]
