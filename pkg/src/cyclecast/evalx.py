"""Verification metrics, the variational increment oracle, and diagnostics.

Metrics follow one convention throughout: latitude-weighted spatial
aggregation per initialization time, then a plain mean over the test set.
The oracle solves the linear analysis-increment equation densely, and the
experiment drivers (single-observation, data denial, training-setting
ablation) reuse the cycling machinery unchanged so their outputs are
comparable with ordinary runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import cycler as C
from . import damodel as D
from . import fcmodel as F
from . import obsproc as OP
from . import satsim as S
from . import state as ST
from .grid import GridSpec
from .state import StateCube

METRIC_KINDS = ("RMSE", "ACC", "MBE", "STD_ERROR")
ACC_THRESHOLD = 0.6


# ---- geometry helpers ----

def great_circle_deg(lat1, lon1, lat2, lon2):
    """Great-circle separation in degrees; broadcasts like numpy."""
    p1 = np.deg2rad(np.asarray(lat1, dtype=np.float64))
    p2 = np.deg2rad(np.asarray(lat2, dtype=np.float64))
    dlat = p2 - p1
    dlon = np.deg2rad(np.asarray(lon2, dtype=np.float64)) \
        - np.deg2rad(np.asarray(lon1, dtype=np.float64))
    a = np.sin(dlat / 2.0) ** 2 \
        + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2.0) ** 2
    out = np.rad2deg(2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))
    return float(out) if out.ndim == 0 else out


# ---- regions ----

@dataclass(frozen=True)
class RegionBox:
    """Latitude/longitude box in degrees; longitudes may wrap the dateline."""

    name: str
    lat_s: float
    lat_n: float
    lon_w: float
    lon_e: float

    def __post_init__(self):
        if not self.lat_s < self.lat_n:
            raise ValueError("latitude range must run south to north")

    def mask(self, grid: GridSpec) -> np.ndarray:
        latm = (grid.lats >= self.lat_s) & (grid.lats <= self.lat_n)
        if self.lon_w <= self.lon_e:
            lonm = (grid.lons >= self.lon_w) & (grid.lons <= self.lon_e)
        else:
            lonm = (grid.lons >= self.lon_w) | (grid.lons <= self.lon_e)
        m = latm[:, None] & lonm[None, :]
        if not m.any():
            raise ValueError(f"region {self.name!r} has no cells on the grid")
        return m


WHOLE_GLOBE = RegionBox("global", -90.0, 90.0, -180.0, 180.0)
CENTRAL_AFRICA = RegionBox("central-africa", -10.0, 10.0, 15.0, 35.0)


# ---- climatology ----

class Climatology:
    """Per-(day-of-year, hour-of-day) mean states from a reference period.

    The year length comes from the generating parameters and must be a whole
    number of days so repeated days line up exactly.
    """

    def __init__(self, grid, fields, t_start, t_end, year_days):
        if int(year_days) != year_days or int(year_days) <= 0:
            raise ValueError("year length must be a whole positive number "
                             "of days")
        self.grid = grid
        self.year_days = int(year_days)
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        shape = (ST.n_channels(grid), grid.n_lat, grid.n_lon)
        self.fields = {}
        for key, arr in fields.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"climatology field {key} has shape "
                                 f"{arr.shape}, expected {shape}")
            self.fields[key] = arr

    @classmethod
    def from_run(cls, run, hours=(0.0, 6.0, 12.0, 18.0), span=None):
        """Fit from a run, optionally restricted to `span` = (start_h, end_h)
        so the reference period stays disjoint from any test window."""
        yd = run.params.year_days
        if int(yd) != yd or int(yd) <= 0:
            raise ValueError("year length must be a whole positive number "
                             "of days to key a climatology")
        yd = int(yd)
        t_lo, t_hi = (run.t_start, run.t_end) if span is None else span
        if t_lo < run.t_start or t_hi > run.t_end or t_hi <= t_lo:
            raise ValueError(f"climatology span {span} leaves the run "
                             f"[{run.t_start}, {run.t_end}] h")
        wanted = {float(h) for h in hours}
        sums = {}
        counts = {}
        for t in np.arange(t_lo, t_hi + 0.5, 1.0):
            hod = t % 24.0
            if hod not in wanted:
                continue
            key = (int(t // 24.0) % yd, hod)
            cube = run.get_state(float(t))
            if key in sums:
                sums[key] += cube.data
                counts[key] += 1
            else:
                sums[key] = cube.data.copy()
                counts[key] = 1
        fields = {k: sums[k] / counts[k] for k in sums}
        return cls(run.params.grid, fields, t_lo, t_hi, yd)

    def key_of(self, time_h: float):
        return (int(time_h // 24.0) % self.year_days, time_h % 24.0)

    def covers(self, time_h: float) -> bool:
        return self.t_start <= time_h <= self.t_end

    def lookup(self, time_h: float) -> np.ndarray:
        key = self.key_of(time_h)
        if key not in self.fields:
            raise KeyError(f"no climatology for day {key[0]} hour {key[1]}")
        return self.fields[key]


# ---- evaluation sets and metric tables ----

@dataclass(frozen=True)
class EvalSet:
    """Initialization times and a uniform ladder of lead hours."""

    t0s: tuple
    leads_h: tuple

    def __post_init__(self):
        if not self.t0s or not self.leads_h:
            raise ValueError("empty evaluation set")
        object.__setattr__(self, "t0s", tuple(float(t) for t in self.t0s))
        object.__setattr__(self, "leads_h",
                           tuple(float(x) for x in self.leads_h))
        if any(x < 0 for x in self.leads_h):
            raise ValueError("lead hours must be nonnegative")
        steps = np.diff(self.leads_h)
        if steps.size and (np.any(steps <= 0) or np.any(steps != steps[0])):
            raise ValueError("leads must form a uniform increasing ladder")

    @classmethod
    def against(cls, run, t0s, leads_h):
        es = cls(tuple(t0s), tuple(leads_h))
        lo = min(es.t0s)
        hi = max(es.t0s) + max(es.leads_h)
        if lo < run.t_start or hi > run.t_end:
            raise ValueError(f"evaluation needs [{lo}, {hi}] h, beyond the "
                             f"run span [{run.t_start}, {run.t_end}]")
        return es

    def valid_times(self):
        return sorted({t0 + l for t0 in self.t0s for l in self.leads_h})


class MetricSeries:
    """Tagged metric table: rows of (variable, level, lead_hours, metric,
    value)."""

    def __init__(self, model, region, rows):
        self.model = str(model)
        self.region = str(region)
        self.rows = []
        for var, level, lead, metric, value in rows:
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"non-finite {metric} for {var}@{level} "
                                 f"lead {lead}: value must be finite")
            self.rows.append((str(var), int(level), float(lead), str(metric),
                              value))

    def value(self, variable, level, lead_h, metric=None):
        for var, lev, lead, kind, val in self.rows:
            if (var, lev, lead) == (variable, int(level), float(lead_h)) \
                    and (metric is None or kind == metric):
                return val
        raise KeyError(f"no row for {variable}@{level} lead {lead_h}")


CSV_HEADER = ("model", "region", "variable", "level", "lead_hours",
              "metric", "value")


def write_metric_csv(path, series_list):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for series in series_list:
            for var, level, lead, metric, value in series.rows:
                writer.writerow((series.model, series.region, var, level,
                                 lead, metric, value))


def compute_metric(kind, forecasts, truths, eval_set: EvalSet,
                   grid: GridSpec, clim: Climatology | None = None,
                   region: RegionBox | None = None,
                   model: str = "model") -> MetricSeries:
    """One verification metric over a (t0, lead, channel) block of fields.

    forecasts/truths: (|t0s|, |leads|, C, H, W). The spatial aggregation is
    weighted by mean-one latitude weights inside the region (whole globe by
    default) and samples enter as per-t0 aggregates averaged over the set.
    """
    if kind not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {kind!r}")
    fc = np.asarray(forecasts, dtype=np.float64)
    tr = np.asarray(truths, dtype=np.float64)
    want = (len(eval_set.t0s), len(eval_set.leads_h),
            ST.n_channels(grid), grid.n_lat, grid.n_lon)
    if fc.shape != tr.shape or fc.shape != want:
        raise ValueError(f"field shape mismatch: forecasts {fc.shape}, "
                         f"truths {tr.shape}, eval set wants {want}")
    box = WHOLE_GLOBE if region is None else region
    mask = box.mask(grid)
    w = np.broadcast_to(grid.lat_weights()[:, None],
                        (grid.n_lat, grid.n_lon))[mask]
    wsum = w.sum()

    if kind == "ACC":
        if clim is None:
            raise ValueError("ACC needs a climatology for anomalies")
        bad = [t for t in eval_set.valid_times() if clim.covers(t)]
        if bad:
            raise ValueError(f"climatology reference period must be disjoint "
                             f"from the test period (valid time {bad[0]} h "
                             f"falls inside it)")
        marr = np.empty_like(fc)
        for s, t0 in enumerate(eval_set.t0s):
            for li, lead in enumerate(eval_set.leads_h):
                marr[s, li] = clim.lookup(t0 + lead)
        fa = (fc - marr)[..., mask]
        ta = (tr - marr)[..., mask]
        num = (fa * ta * w).sum(axis=-1)
        den2 = (fa * fa * w).sum(axis=-1) * (ta * ta * w).sum(axis=-1)
        if np.any(den2 <= 0.0):
            raise ValueError("zero anomaly variance: ACC undefined")
        vals = (num / np.sqrt(den2)).mean(axis=0)
    else:
        e = (fc - tr)[..., mask]
        mbe = ((e * w).sum(axis=-1) / wsum).mean(axis=0)
        if kind == "MBE":
            vals = mbe
        elif kind == "RMSE":
            vals = np.sqrt((e * e * w).sum(axis=-1) / wsum).mean(axis=0)
        else:
            dev = e - mbe[None, :, :, None]
            vals = np.sqrt((dev * dev * w).sum(axis=-1) / wsum).mean(axis=0)

    rows = []
    for c in range(want[2]):
        var, level = ST.channel_var_level(grid, c)
        for li, lead in enumerate(eval_set.leads_h):
            rows.append((var, level, lead, kind, float(vals[li, c])))
    return MetricSeries(model, box.name, rows)


def normalized_diff(a: float, b: float, kind: str) -> float:
    """Relative skill difference of model A against baseline B."""
    if kind == "RMSE":
        if b == 0.0:
            raise ValueError("degenerate baseline: RMSE of zero")
        return (a - b) / b
    if kind == "ACC":
        if b == 1.0:
            raise ValueError("degenerate baseline: ACC of one")
        return (a - b) / (1.0 - b)
    raise ValueError(f"no normalized difference for kind {kind!r}")


def skillful_lead_time(acc_values, step_h: float = 6.0,
                       threshold: float = ACC_THRESHOLD) -> float:
    """Days until the correlation series first drops below the threshold.

    The series starts at one step of lead; a series that never crosses is
    credited with its full horizon.
    """
    vals = [float(v) for v in acc_values]
    if not vals:
        raise ValueError("empty correlation series")
    for idx, v in enumerate(vals):
        if v < threshold:
            return idx * step_h / 24.0
    return len(vals) * step_h / 24.0


# ---- linear analysis-increment oracle ----

def gaussian_correlation(grid: GridSpec, length_scale_deg: float) -> np.ndarray:
    """Gaussian correlation over flattened grid cells, chordal distance.

    The chordal form keeps the matrix positive-definite on the sphere; the
    length scale is quoted in great-circle degrees and converted to the
    equivalent chord.
    """
    if length_scale_deg <= 0:
        raise ValueError("length scale must be positive")
    lat = np.repeat(grid.lats, grid.n_lon)
    lon = np.tile(grid.lons, grid.n_lat)
    theta = np.deg2rad(great_circle_deg(lat[:, None], lon[:, None],
                                        lat[None, :], lon[None, :]))
    chord = 2.0 * np.sin(theta / 2.0)
    s = 2.0 * np.sin(np.deg2rad(length_scale_deg) / 2.0)
    return np.exp(-0.5 * (chord / s) ** 2)


def gaussian_b(grid: GridSpec, sigma_b: float,
               length_scale_deg: float) -> np.ndarray:
    return sigma_b ** 2 * gaussian_correlation(grid, length_scale_deg)


@dataclass
class VarOracle:
    """Dense ingredients of the linear analysis-increment equation."""

    b: np.ndarray        # (n, n) background error covariance
    r_diag: np.ndarray   # (m,) observation error variances
    h: np.ndarray        # (m, n) linear observation operator
    background: np.ndarray
    obs: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.r_diag = np.asarray(self.r_diag, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.b.ndim != 2 or self.b.shape[0] != self.b.shape[1]:
            raise ValueError(f"B has shape {self.b.shape}, expected square")
        n = self.b.shape[0]
        if self.h.ndim != 2 or self.h.shape[1] != n:
            raise ValueError(f"H has shape {self.h.shape}, expected (m, {n})")
        m = self.h.shape[0]
        if self.r_diag.shape != (m,) or self.background.shape != (n,) \
                or self.obs.shape != (m,):
            raise ValueError("R/background/observation shape mismatch with "
                             f"H {self.h.shape}")
        scale = max(1.0, float(np.abs(self.b).max()))
        if not np.allclose(self.b, self.b.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("B must be symmetric")
        if np.any(self.r_diag < 0.0):
            raise ValueError("negative observation variance")


def var3d_increment(oracle: VarOracle) -> np.ndarray:
    """Analysis increment from a dense solve of the innovation system."""
    hb = oracle.h @ oracle.b
    s = hb @ oracle.h.T + np.diag(oracle.r_diag)
    innov = oracle.obs - oracle.h @ oracle.background
    try:
        x = np.linalg.solve(s, innov)
    except np.linalg.LinAlgError:
        raise ValueError("singular innovation covariance (observation "
                         "operator rows collide with zero error)") from None
    return oracle.b @ (oracle.h.T @ x)


def weighting_peak_level(inst, grid: GridSpec, target: str) -> int:
    """Pressure level where an instrument's sensitivity to a field peaks."""
    idx = [k for k, ch in enumerate(inst.channels) if ch.target == target]
    if not idx:
        raise ValueError(f"{inst.inst_id!r} has no {target!r} channels")
    wt, wv = S.weighting_matrices(inst, grid.n_levels)
    w = (wt if target == "t" else wv)[idx].sum(axis=0)
    return int(grid.levels[int(np.argmax(w))])


# ---- single-observation experiment ----

@dataclass(frozen=True)
class ObsPerturbation:
    inst_id: str
    channel: int
    lat_deg: float
    lon_deg: float
    magnitude_k: float
    patch: int = 5

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch must be a positive odd cell count")
        if not math.isfinite(self.magnitude_k):
            raise ValueError("perturbation magnitude must be finite")


def single_obs_test(state, source, net, norm,
                    pert: ObsPerturbation) -> StateCube:
    """Increment caused by perturbing one instrument patch in the window.

    Runs the assimilation twice, once on the window as simulated and once
    with the perturbation added at occupied cells, and differences the raw
    analyses. A zero magnitude therefore yields an exactly zero increment.
    """
    specs = {i.inst_id: i for i in source.instruments}
    if pert.inst_id not in specs:
        raise ValueError(f"unknown instrument {pert.inst_id!r}")
    nch = len(specs[pert.inst_id].channels)
    if not 0 <= pert.channel < nch:
        raise ValueError(f"channel {pert.channel} out of range for "
                         f"{pert.inst_id!r} with {nch} channels")

    grid = state.background.grid
    gridded, ro_frames = source.window(state.time_h)
    base = D.da_forward(net, state.background, list(gridded.values()),
                        ro_frames, norm)

    i0, j0 = (int(x) for x in grid.cell_of(pert.lat_deg, pert.lon_deg))
    half = pert.patch // 2
    rows = [r for r in range(i0 - half, i0 + half + 1) if 0 <= r < grid.n_lat]
    cols = sorted({(j0 + dj) % grid.n_lon
                   for dj in range(-half, half + 1)})
    perturbed = {}
    for key, gobs in gridded.items():
        if key == pert.inst_id and pert.magnitude_k != 0.0:
            std = source.obs_stats.by_inst[pert.inst_id][1][pert.channel]
            gobs = OP.GriddedObs(gobs.inst_id, gobs.t0, list(gobs.frames),
                                 gobs.data.copy(), gobs.mask)
            sel = np.ix_(np.arange(gobs.data.shape[0]), rows, cols)
            view = gobs.data[:, pert.channel]
            view[sel] += (pert.magnitude_k / float(std)) * gobs.mask[sel]
        perturbed[key] = gobs
    shifted = D.da_forward(net, state.background, list(perturbed.values()),
                           ro_frames, norm)
    return StateCube(grid, shifted.data - base.data, state.time_h)


def energy_radius(increment: StateCube, lat_deg: float, lon_deg: float,
                  frac: float = 0.99) -> float:
    """Great-circle radius in degrees holding `frac` of squared increment."""
    grid = increment.grid
    e = (increment.data.astype(np.float64) ** 2).sum(axis=0).ravel()
    total = e.sum()
    if total == 0.0:
        return 0.0
    d = great_circle_deg(lat_deg, lon_deg, grid.lats[:, None],
                         grid.lons[None, :]).ravel()
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(e[order])
    idx = min(int(np.searchsorted(cum, frac * total)), cum.size - 1)
    return float(d[order][idx])


# ---- data denial ----

@dataclass
class ControlRun:
    """Cold-start state and per-cycle analyses of a full-observation run."""

    state0: C.CycleState
    analyses: list


DENIAL_PROTOCOLS = ("fixed-background", "fully-cycled")


def _without_instrument(source, denied_id):
    base = source.outages
    outages = dict(base.outages) if base is not None else {}
    biases = dict(base.biases) if base is not None else {}
    outages[denied_id] = list(outages.get(denied_id, ())) \
        + [(-1e18, 1e18)]
    sched = S.OutageSchedule(outages=outages, biases=biases)
    return C.ObsSource(source.run, source.instruments, source.ro,
                       source.pp, sched, source.obs_stats)


def denial_experiment(protocol, denied_id, control: ControlRun, source,
                      net, cascade, norm, model=None) -> MetricSeries:
    """Relative analysis-error change from withholding one observing system.

    fixed-background reuses the control run's own 6-hour forecasts as
    backgrounds so each cycle is judged in isolation; fully-cycled re-runs
    the whole chain so denial effects compound through the backgrounds.
    """
    if protocol not in DENIAL_PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    known = {i.inst_id for i in source.instruments}
    if source.ro is not None:
        known.add(source.ro.inst_id)
    if denied_id is not None and denied_id not in known:
        raise ValueError(f"unknown instrument {denied_id!r}")
    denied_source = source if denied_id is None \
        else _without_instrument(source, denied_id)

    n = len(control.analyses)
    start = max(0, C.SPIN_UP_CYCLES - control.state0.index)
    if start >= n:
        raise ValueError(f"control run has no cycles past spin-up "
                         f"({n} cycles, {start} excluded)")

    if protocol == "fixed-background":
        analyses = []
        for j in range(n):
            if j == 0:
                bg = control.state0.background
            else:
                bg = F.rollout(cascade, control.analyses[j - 1], 1, norm)[1]
            t0 = control.analyses[j].time_h
            gridded, ro_frames = denied_source.window(t0)
            a = D.da_forward(net, bg, list(gridded.values()), ro_frames, norm)
            np.clip(a.field("r"), 0.0, 100.0, out=a.field("r"))
            analyses.append(a)
    else:
        _, analyses, _ = C.run_cycles(control.state0, n, denied_source, net,
                                      cascade, norm)

    grid = control.analyses[0].grid
    t0s = tuple(a.time_h for a in control.analyses[start:])
    es = EvalSet(t0s, (0.0,))
    truth = np.stack([source.run.get_state(t).data for t in t0s])[:, None]
    ctl = np.stack([a.data for a in control.analyses[start:]])[:, None]
    den = np.stack([a.data for a in analyses[start:]])[:, None]
    tag = model or f"deny-{denied_id or 'none'}-{protocol}"
    rms_c = compute_metric("RMSE", ctl, truth, es, grid, model="control")
    rms_d = compute_metric("RMSE", den, truth, es, grid, model=tag)

    rows = []
    for (var, lev, lead, _, vc), (_, _, _, _, vd) in zip(rms_c.rows,
                                                         rms_d.rows):
        if vc == 0.0:
            raise ValueError(f"control RMSE vanishes for {var}@{lev}")
        rows.append((var, lev, lead, "RMSE_PCT_CHANGE",
                     100.0 * (vd - vc) / vc))
    return MetricSeries(tag, rms_c.region, rows)


# ---- training-setting ablation ----

ABLATION_SETTINGS = {
    1: {"incremental": True, "finetune": True},
    2: {"incremental": False, "finetune": True},
    3: {"incremental": True, "finetune": False},
    4: {"incremental": False, "finetune": False},
}


def ablation_matrix(run_setting, settings=(1, 2, 3, 4)):
    """Run one trainable variant per setting and collect its metric table.

    run_setting(incremental=..., finetune=...) must return a MetricSeries;
    all settings must report the same (variable, level, lead) rows so the
    tables line up.
    """
    out = {}
    ref = None
    for s in settings:
        if s not in ABLATION_SETTINGS:
            raise ValueError(f"unknown setting {s!r}")
        series = run_setting(**ABLATION_SETTINGS[s])
        keys = [(var, lev, lead) for var, lev, lead, _, _ in series.rows]
        if ref is None:
            ref = keys
        elif keys != ref:
            raise ValueError("settings disagree on output rows")
        out[s] = series
    return out
