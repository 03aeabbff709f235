"""Observation preprocessing: QC, gridding, normalization, window stacking.

Radiance samples go through per-channel gross checks, nearest-cell binning
with averaging, and z-scoring against frozen per-instrument statistics;
occultation profiles are interpolated onto a common height ladder and turned
into per-cell feature columns by a small learned encoder (the pillar path).
Empty cells stay exactly zero everywhere so that mask * data == data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import satsim as S
from . import tensor as T
from .grid import GridSpec
from .layers import ParamStore

N_ENC_CHANNELS = 3  # latitude, longitude, scan-angle encodings


@dataclass(frozen=True)
class ObsProcParams:
    qc_min_k: float = 50.0     # gross-check bounds, kelvin
    qc_max_k: float = 350.0
    d_heights: int = 64        # pillar interpolation ladder size
    e_features: int = 16       # encoded features per column
    ro_scale: float = 360.0    # refractivity units per normalized unit


@dataclass
class GriddedObs:
    """One instrument's window on the analysis grid.

    data: (F, C + 3, H, W) channel means then geometry encodings per frame;
    mask: (F, H, W) cell occupancy, 0 or 1. Frames are chronological.
    """

    inst_id: str
    t0: float
    frames: list
    data: np.ndarray
    mask: np.ndarray


def encode_geometry(lats, lons, scans, scan_max_deg):
    """Bounded per-sample geometry encodings, each in [-1, 1]."""
    lat_enc = np.sin(np.radians(lats))
    lon_enc = np.sin(np.radians(lons) / 2.0)
    scan_enc = np.asarray(scans) / scan_max_deg
    return np.stack([lat_enc, lon_enc, scan_enc])


def qc_pass(bt, pp: ObsProcParams):
    """(n, C) bool: physically plausible brightness temperatures."""
    return (bt >= pp.qc_min_k) & (bt <= pp.qc_max_k)


def bin_frame(table: S.ObsTable, inst: S.InstrumentSpec, grid: GridSpec,
              pp: ObsProcParams):
    """Average one hour block of samples onto the grid.

    Returns (data (C + 3, H, W), mask (H, W)). QC runs per channel before
    averaging; a cell is occupied if any sample contributes any channel.
    Geometry encodings average over the contributing samples.
    """
    C = len(inst.channels)
    data = np.zeros((C + N_ENC_CHANNELS, grid.n_lat, grid.n_lon))
    mask = np.zeros((grid.n_lat, grid.n_lon))
    if table.times.size == 0:
        return data, mask
    valid = qc_pass(table.bt, pp)
    keep = valid.any(axis=1)
    if not keep.any():
        return data, mask
    rows, cols = grid.cell_of(table.lats[keep], table.lons[keep])
    flat = rows * grid.n_lon + cols
    ncell = grid.n_lat * grid.n_lon
    bt = table.bt[keep]
    vk = valid[keep]
    for c in range(C):
        sums = np.bincount(flat[vk[:, c]], weights=bt[vk[:, c], c],
                           minlength=ncell).astype(float)
        cnts = np.bincount(flat[vk[:, c]], minlength=ncell).astype(float)
        np.divide(sums, cnts, out=sums, where=cnts > 0)
        data[c] = sums.reshape(grid.n_lat, grid.n_lon)
    enc = encode_geometry(table.lats[keep], table.lons[keep], table.scans[keep],
                          inst.scan_max_deg)
    cnts = np.bincount(flat, minlength=ncell).astype(float)
    for e in range(N_ENC_CHANNELS):
        sums = np.bincount(flat, weights=enc[e], minlength=ncell)
        np.divide(sums, cnts, out=sums, where=cnts > 0)
        data[C + e] = sums.reshape(grid.n_lat, grid.n_lon)
    mask.flat[flat] = 1.0
    return data, mask


def gridded_from_tables(inst, grid, t0, tables_by_frame, pp: ObsProcParams):
    """Assemble a GriddedObs from per-hour tables; missing hours stay zero."""
    frames = S.window_frames(t0)
    C = len(inst.channels)
    data = np.zeros((len(frames), C + N_ENC_CHANNELS, grid.n_lat, grid.n_lon))
    mask = np.zeros((len(frames), grid.n_lat, grid.n_lon))
    for k, h in enumerate(frames):
        tab = tables_by_frame.get(h)
        if tab is not None:
            data[k], mask[k] = bin_frame(tab, inst, grid, pp)
    return GriddedObs(inst.inst_id, t0, frames, data, mask)


def stack_window(gobs: GriddedObs):
    """Concatenate frames chronologically: (F*(C+3), H, W) plus (F, H, W) mask."""
    f, c, h, w = gobs.data.shape
    return gobs.data.reshape(f * c, h, w), gobs.mask


def build_window(run, instruments, ro, t0, pp, outages, obs_stats):
    """Simulate, grid, and normalize one assimilation window.

    Returns (inst_id -> normalized GriddedObs in float32, pillar frame list
    or None). Touches only the window's own hourly frames of the run.
    """
    t0 = float(t0)
    frames = S.window_frames(t0)
    grid = run.params.grid
    gridded = {}
    for inst in instruments:
        tabs = {h: S.simulate_hour_block(inst, run, h, outages)
                for h in frames}
        g = gridded_from_tables(inst, grid, t0, tabs, pp)
        g = obs_stats.normalize_gridded(g, len(inst.channels))
        g.data = g.data.astype(np.float32)
        gridded[inst.inst_id] = g
    ro_frames = None
    if ro is not None:
        ro_frames = [build_pillars(S.simulate_ro_hour(run, h, ro, outages),
                                   grid, pp) for h in frames]
    return gridded, ro_frames


class NormStats:
    """Frozen per-instrument channel statistics for z-scoring."""

    def __init__(self, by_inst):
        self.by_inst = {k: (np.asarray(m, dtype=float), np.asarray(s, dtype=float))
                        for k, (m, s) in by_inst.items()}
        self.version = self._digest()

    def _digest(self):
        payload = {k: [list(map(float, m)), list(map(float, s))]
                   for k, (m, s) in sorted(self.by_inst.items())}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self):
        return {k: {"mean": [float(x) for x in m], "std": [float(x) for x in s]}
                for k, (m, s) in self.by_inst.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({k: (v["mean"], v["std"]) for k, v in d.items()})

    def normalize_gridded(self, gobs: GriddedObs, n_bt: int) -> GriddedObs:
        """Z-score the first n_bt channels at occupied cells; encodings pass
        through and empty cells stay zero."""
        mean, std = self.by_inst[gobs.inst_id]
        if mean.size != n_bt:
            raise ValueError(f"stats for {gobs.inst_id!r} have {mean.size} "
                             f"channels, expected {n_bt}")
        data = gobs.data.copy()
        m = gobs.mask[:, None]
        data[:, :n_bt] = m * (data[:, :n_bt] - mean[None, :, None, None]) \
            / std[None, :, None, None]
        return GriddedObs(gobs.inst_id, gobs.t0, list(gobs.frames), data,
                          gobs.mask.copy())


def compute_norm_stats(tables_by_inst, insts, pp: ObsProcParams = ObsProcParams()):
    """Per-instrument channel mean/std over QC-passing raw samples.

    tables_by_inst: dict inst_id -> iterable of ObsTable. A channel whose
    spread vanishes cannot be z-scored and is reported by name.
    """
    by_inst = {}
    for inst_id, tables in sorted(tables_by_inst.items()):
        C = len(insts[inst_id].channels)
        mean = np.zeros(C)
        std = np.zeros(C)
        for c in range(C):
            vals = [tab.bt[qc_pass(tab.bt, pp)[:, c], c] for tab in tables
                    if tab.times.size]
            allv = np.concatenate(vals) if vals else np.zeros(0)
            if allv.size < 2:
                raise ValueError(f"instrument {inst_id!r} channel {c}: "
                                 f"not enough samples for statistics")
            mean[c] = allv.mean()
            std[c] = allv.std()
            if std[c] == 0.0:
                raise ValueError(f"instrument {inst_id!r} channel {c}: "
                                 f"zero spread, cannot normalize")
        by_inst[inst_id] = (mean, std)
    return NormStats(by_inst)


# ---- Occultation pillar path ----

@dataclass
class PillarBatch:
    """Interpolated, scaled profile columns ready for encoding.

    matrix: (N, D) refractivity / ro_scale on the common ladder;
    rows/cols: (N,) grid cell of each column.
    """

    matrix: np.ndarray
    rows: np.ndarray
    cols: np.ndarray


def build_pillars(prof: S.ROProfiles, grid: GridSpec, pp: ObsProcParams):
    n = prof.times.size
    if n == 0:
        return PillarBatch(np.zeros((0, pp.d_heights)),
                           np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    ladder = np.linspace(prof.heights.min(), prof.heights.max(), pp.d_heights)
    matrix = np.empty((n, pp.d_heights))
    for k in range(n):
        matrix[k] = np.interp(ladder, prof.heights[k], prof.values[k])
    matrix /= pp.ro_scale
    rows, cols = grid.cell_of(prof.lats, prof.lons)
    return PillarBatch(matrix, rows, cols)


class PillarEncoderParams:
    """Learned column encoder: linear D -> E then layer norm."""

    def __init__(self, store: ParamStore, prefix: str):
        self.params = store
        self.prefix = prefix

    @classmethod
    def init(cls, rng, pp: ObsProcParams, prefix="pillar"):
        store = ParamStore(rng)
        store.linear(f"{prefix}.lin", pp.d_heights, pp.e_features)
        store.layer_norm(f"{prefix}.ln", pp.e_features)
        return cls(store, prefix)

    def name(self, leaf):
        return f"{self.prefix}.{leaf}"


def pillar_features(batch: PillarBatch, enc: PillarEncoderParams):
    """(N, D) -> (N, E) Tensor through the encoder; differentiable."""
    p = enc.params
    x = T.as_tensor(batch.matrix)
    h = T.matmul(x, p[enc.name("lin.w")]) + p[enc.name("lin.b")]
    return T.layer_norm(h, p[enc.name("ln.g")], p[enc.name("ln.b")], axis=-1)


def encode_pillars(batch: PillarBatch, grid: GridSpec, enc: PillarEncoderParams):
    """Scatter encoded columns to the grid: (E, H, W) Tensor plus (H, W) mask."""
    e = enc.params[enc.name("lin.w")].data.shape[1]
    hw = grid.n_lat * grid.n_lon
    mask = np.zeros((grid.n_lat, grid.n_lon))
    if batch.matrix.shape[0] == 0:
        return T.as_tensor(np.zeros((e, grid.n_lat, grid.n_lon))), mask
    feats = pillar_features(batch, enc)
    flat = batch.rows * grid.n_lon + batch.cols
    cells = T.scatter_mean(feats, flat, hw)
    out = T.reshape(T.transpose(cells, (1, 0)), (e, grid.n_lat, grid.n_lon))
    mask.flat[np.unique(flat)] = 1.0
    return out, mask
