"""Training loops: assimilation stages, forecast pretraining, fine-tuning.

The assimilation network trains against a frozen forecast model with a joint
loss: analysis error plus the mean error of T autoregressive steps launched
from the analysis. Stage 1 draws backgrounds uniformly from {cold start} and
forecast leads up to five days; stage 2 drops the cold start and caps leads at
three days. Monthly refreshes replay a rolling window of recent analysis
times. All loops are deterministic given their seeds.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from . import fcmodel as F
from . import obsproc as OP
from . import satsim as S
from . import tensor as T
from .layers import set_requires_grad
from .optim import AdamW, LrSchedule, lr_at
from .state import StateNorm, n_channels

STEP_H = F.STEP_HOURS


# ---- Losses ----

def l1_lat_loss(pred, truth, grid=None, weights=None):
    """Latitude-weighted mean absolute error over a (C, H, W) field.

    Row weights have mean one (pass `weights` to override the grid's cosine
    law), so a constant offset of d yields exactly d.
    """
    pred = T.as_tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    w = grid.lat_weights() if weights is None else np.asarray(weights, float)
    diff = T.abs_(pred - T.as_tensor(truth))
    return T.sum_(diff * w[None, :, None]) * (1.0 / truth.size)


def joint_loss(analysis, truth0, forecasts, truths, grid, weights=None):
    """Analysis error plus the mean error over T forecast steps."""
    if not forecasts or len(forecasts) != len(truths):
        raise ValueError(f"need matching non-empty forecast/truth lists, got "
                         f"{len(forecasts)} and {len(truths)}")
    loss = l1_lat_loss(analysis, truth0, grid, weights)
    fsum = None
    for fc_t, tr_t in zip(forecasts, truths):
        term = l1_lat_loss(fc_t, tr_t, grid, weights)
        fsum = term if fsum is None else fsum + term
    return loss + fsum * (1.0 / len(forecasts))


# ---- Configuration ----

@dataclass(frozen=True)
class TrainConfig:
    stage1_updates: int
    stage2_updates: int = 0
    t_joint: int = 1
    stage1_max_lead_h: float = 120.0
    stage2_max_lead_h: float = 72.0
    schedule: LrSchedule = LrSchedule()
    incremental_lr: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.stage1_updates < 0 or self.stage2_updates < 0:
            raise ValueError("update counts must be >= 0")
        if self.t_joint < 1:
            raise ValueError("joint loss needs at least one forecast step")
        if self.stage2_max_lead_h < STEP_H:
            raise ValueError("stage 2 needs at least one forecast lead")


# ---- Dataset: truth, cached observation windows, background pool ----

class DaDataset:
    """Assimilation training data bound to one nature run.

    Observation windows are simulated once per analysis time and cached;
    backgrounds are forecast-model rollouts from earlier truth states, cached
    as float32 in normalized units. Lead 0 means the cold-start zero state.
    """

    def __init__(self, run, instruments, ro, cascade, state_norm: StateNorm,
                 all_t0s, train_t0s, val_t0s, pp: OP.ObsProcParams,
                 outages, obs_stats: OP.NormStats):
        self.run = run
        self.instruments = list(instruments)
        self.ro = ro
        self.cascade = cascade
        self.state_norm = state_norm
        self.all_t0s = [float(t) for t in all_t0s]
        self.train_t0s = [float(t) for t in train_t0s]
        self.val_t0s = [float(t) for t in val_t0s]
        self.pp = pp
        self.outages = outages
        self.obs_stats = obs_stats
        self.grid = run.params.grid
        self.run_start_h = float(run.t_start)
        self.run_end_h = float(run.t_end)
        for t0 in self.all_t0s + self.train_t0s + self.val_t0s:
            if t0 % STEP_H:
                raise ValueError(f"analysis time {t0} not on the 6 h cycle")
            frames = S.window_frames(t0)
            if frames[0] < self.run_start_h or frames[-1] > self.run_end_h:
                raise ValueError(f"window of t0={t0} leaves the run "
                                 f"[{self.run_start_h}, {self.run_end_h}]")
        self._obs_cache = {}
        self._bg_cache = {}
        self._zero_bg = None

    def obs(self, t0):
        """(gridded dict, pillar frame list or None) for one window, cached."""
        t0 = float(t0)
        hit = self._obs_cache.get(t0)
        if hit is not None:
            return hit
        self._obs_cache[t0] = OP.build_window(
            self.run, self.instruments, self.ro, t0, self.pp, self.outages,
            self.obs_stats)
        return self._obs_cache[t0]

    def truth_norm(self, t):
        return self.state_norm.normalize(self.run.get_state(float(t)).data)

    def background_norm(self, t0, lead_h):
        """Normalized (C, H, W) background for analysis time t0."""
        t0, lead_h = float(t0), float(lead_h)
        if lead_h == 0.0:
            if self._zero_bg is None:
                C = n_channels(self.grid)
                zero = np.zeros((C, self.grid.n_lat, self.grid.n_lon))
                self._zero_bg = self.state_norm.normalize(zero)
            return self._zero_bg.copy()
        if lead_h < 0 or lead_h % STEP_H:
            raise ValueError(f"lead must be a multiple of {STEP_H} h, "
                             f"got {lead_h}")
        if t0 - lead_h < self.run_start_h:
            raise ValueError(f"background init t={t0 - lead_h} precedes the "
                             f"run start {self.run_start_h}")
        key = (t0, lead_h)
        if key not in self._bg_cache:
            steps = int(round(lead_h / STEP_H))
            init = self.run.get_state(t0 - lead_h)
            seq = F.rollout(self.cascade, init, steps, self.state_norm)
            # one rollout serves every (time, lead) pair along its chain
            for k in range(1, steps + 1):
                kk = (t0 - lead_h + STEP_H * k, STEP_H * k)
                if kk not in self._bg_cache:
                    self._bg_cache[kk] = self.state_norm.normalize(
                        seq[k].data).astype(np.float32)
        return self._bg_cache[key].astype(np.float64)


def build_da_dataset(run, instruments, ro, cascade, state_norm, all_t0s,
                     train_t0s, val_t0s, pp: OP.ObsProcParams | None = None,
                     outages=None, obs_stats=None) -> DaDataset:
    """Assemble the dataset; channel statistics default to the training
    windows' own QC-passing samples."""
    pp = OP.ObsProcParams() if pp is None else pp
    if obs_stats is None:
        if not train_t0s:
            raise ValueError("cannot derive channel statistics without "
                             "training windows")
        hours = sorted({h for t0 in train_t0s for h in S.window_frames(t0)})
        tables = {inst.inst_id: [S.simulate_hour_block(inst, run, h, outages)
                                 for h in hours] for inst in instruments}
        obs_stats = OP.compute_norm_stats(
            tables, {i.inst_id: i for i in instruments}, pp)
    return DaDataset(run, instruments, ro, cascade, state_norm, all_t0s,
                     train_t0s, val_t0s, pp, outages, obs_stats)


def sample_background(ds: DaDataset, cfg: TrainConfig, stage: int, t0,
                      rng: np.random.Generator, lead_only: bool = False):
    """Draw a background lead for one update.

    Stage 1 is uniform over the cold start plus every available forecast
    lead; stage 2 drops the cold start and shortens the cap. Leads whose init
    would precede the run are excluded.
    """
    t0 = float(t0)
    max_lead = cfg.stage1_max_lead_h if stage == 1 else cfg.stage2_max_lead_h
    n_max = int(max_lead // STEP_H)
    avail = [STEP_H * k for k in range(1, n_max + 1)
             if t0 - STEP_H * k >= ds.run_start_h]
    choices = ([0.0] + avail) if stage == 1 else avail
    if not choices:
        raise ValueError(f"no background available for t0={t0} in stage "
                         f"{stage}")
    lead = float(rng.choice(choices))
    if lead_only:
        return lead
    return ds.background_norm(t0, lead), lead


# ---- Assimilation training ----

def _joint_terms(net, fc, ds, t0, bg_norm, gridded, ro_frames, t_joint):
    """(analysis term, summed forecast terms) of the joint loss, as Tensors."""
    analysis = net.forward_core(bg_norm, gridded, ro_frames)
    l0 = l1_lat_loss(analysis, ds.truth_norm(t0), ds.grid)
    x = analysis
    fsum = None
    for t in range(1, t_joint + 1):
        statics = F.static_fields(ds.grid, t0 + STEP_H * (t - 1), t,
                                  fc.cfg.year_days)
        x = x + fc.delta_core(x, statics)
        term = l1_lat_loss(x, ds.truth_norm(t0 + STEP_H * t), ds.grid)
        fsum = term if fsum is None else fsum + term
    return l0, fsum


def da_joint_loss(net, fc, ds, t0, bg_norm, gridded, ro_frames, t_joint=1):
    """Scalar joint loss Tensor for one window."""
    if t_joint < 1:
        raise ValueError("joint loss needs at least one forecast step")
    l0, fsum = _joint_terms(net, fc, ds, float(t0), bg_norm, gridded,
                            ro_frames, t_joint)
    return l0 + fsum * (1.0 / t_joint)


def _da_update_loop(net, fc, ds, cfg, pool, stage, updates, opt, rng, lr_fn):
    curve = []
    set_requires_grad(fc.params, False)
    try:
        for step in range(updates):
            t0 = float(rng.choice(pool))
            bg_norm, lead = sample_background(ds, cfg, stage, t0, rng)
            gridded, ro_frames = ds.obs(t0)
            l0, fsum = _joint_terms(net, fc, ds, t0, bg_norm, gridded,
                                    ro_frames, cfg.t_joint)
            loss = l0 + fsum * (1.0 / cfg.t_joint)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite loss at step {step} "
                                   f"(t0={t0}, lead={lead})")
            grads = T.backward(loss, net.params)
            lr = lr_fn(opt.step_count + 1)
            opt.step(grads, lr)
            curve.append({"step": opt.step_count, "lr": lr,
                          "loss": float(loss.data), "l0": float(l0.data),
                          "lfc": float(fsum.data) / cfg.t_joint,
                          "t0": t0, "lead_h": lead})
    finally:
        set_requires_grad(fc.params, True)
    return curve


def train_da_stage(net, fc, ds: DaDataset, cfg: TrainConfig, stage: int,
                   opt: AdamW | None = None):
    """Run one training stage; the optimizer carries the schedule position
    across stages. The forecast model stays frozen throughout."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    updates = cfg.stage1_updates if stage == 1 else cfg.stage2_updates
    if updates == 0:
        return opt, []
    if opt is None:
        opt = AdamW(net.params)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(stage,)))
    curve = _da_update_loop(net, fc, ds, cfg, ds.train_t0s, stage, updates,
                            opt, rng, lambda k: lr_at(cfg.schedule, k))
    return opt, curve


def evaluate_joint(net, fc, ds: DaDataset, t0s, t_joint=1,
                   leads=None) -> float:
    """Mean joint loss over evaluation windows; no graphs are built.

    Every window is scored against every background lead in `leads` (hours;
    0 means the cold-start zero state) and the mean over window-lead pairs
    comes back. The default scores a fixed 6 h background per window; pass a
    stage's full lead set to match what its training loop optimizes.
    """
    if not t0s:
        raise ValueError("nothing to evaluate")
    lead_list = [STEP_H] if leads is None else [float(l) for l in leads]
    if not lead_list:
        raise ValueError("need at least one background lead")
    vals = []
    set_requires_grad(net.params, False)
    set_requires_grad(fc.params, False)
    try:
        for t0 in t0s:
            gridded, ro_frames = ds.obs(t0)
            for lead in lead_list:
                bg_norm = ds.background_norm(t0, lead)
                loss = da_joint_loss(net, fc, ds, t0, bg_norm, gridded,
                                     ro_frames, t_joint)
                vals.append(float(loss.data))
    finally:
        set_requires_grad(net.params, True)
        set_requires_grad(fc.params, True)
    return float(np.mean(vals))


# ---- Forecast model training ----

def train_fc(model, run, norm: StateNorm, t0s, updates, schedule: LrSchedule,
             seed: int = 0):
    """Single-step pretraining on truth pairs (t, t + 6 h)."""
    if updates == 0:
        return []
    if not t0s:
        raise ValueError("no training times")
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params)
    grid = model.cfg.grid
    curve = []
    for step in range(updates):
        t0 = float(rng.choice(t0s))
        x = norm.normalize(run.get_state(t0).data)
        y = norm.normalize(run.get_state(t0 + STEP_H).data)
        statics = F.static_fields(grid, t0, 1, model.cfg.year_days)
        pred = T.as_tensor(x) + model.delta_core(x, statics)
        loss = l1_lat_loss(pred, y, grid)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite loss at step {step} (t0={t0})")
        grads = T.backward(loss, model.params)
        lr = lr_at(schedule, opt.step_count + 1)
        opt.step(grads, lr)
        curve.append({"step": opt.step_count, "lr": lr,
                      "loss": float(loss.data), "t0": t0})
    return curve


def finetune_short(model, analyses, norm: StateNorm, max_len: int = 12,
                   updates_per_stage: int = 500, lr: float = 1e-7,
                   seed: int = 0):
    """Curriculum fine-tuning on consecutive analyses.

    Rollout length climbs from 2 to max_len, each visited for
    updates_per_stage updates at a constant learning rate; targets are the
    later analyses themselves. Returns (curve, [(length, updates), ...]).
    """
    if max_len < 2:
        raise ValueError("curriculum starts at rollout length 2")
    n = len(analyses)
    if n < max_len + 1:
        raise ValueError(f"dataset of {n} analyses too short for rollout "
                         f"length {max_len}")
    times = [a.time_h for a in analyses]
    if any(b - a != STEP_H for a, b in zip(times, times[1:])):
        raise ValueError("analyses must be consecutive 6 h states")
    rng = np.random.default_rng(seed)
    opt = AdamW(model.params)
    grid = model.cfg.grid
    norm_data = [norm.normalize(a.data) for a in analyses]
    curve, visits = [], []
    for length in range(2, max_len + 1):
        for u in range(updates_per_stage):
            i = int(rng.integers(0, n - length))
            x = T.as_tensor(norm_data[i])
            fsum = None
            for t in range(1, length + 1):
                statics = F.static_fields(grid, times[i] + STEP_H * (t - 1),
                                          t, model.cfg.year_days)
                x = x + model.delta_core(x, statics)
                term = l1_lat_loss(x, norm_data[i + t], grid)
                fsum = term if fsum is None else fsum + term
            loss = fsum * (1.0 / length)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite loss at length {length} "
                                   f"update {u}")
            grads = T.backward(loss, model.params)
            opt.step(grads, lr)
            curve.append({"length": length, "step": opt.step_count, "lr": lr,
                          "loss": float(loss.data)})
        visits.append((length, updates_per_stage))
    return curve, visits


# ---- Incremental refresh on a rolling window of months ----

class ReplayBuffer:
    """Ordered month -> analysis-times map capped at a fixed window."""

    def __init__(self, window_months: int = 12):
        if window_months < 1:
            raise ValueError("window must hold at least one month")
        self.window_months = window_months
        self._months = []

    @property
    def months(self):
        return [k for k, _ in self._months]

    def add_month(self, key: str, t0s) -> bool:
        """True if ingested; a repeated key is a no-op."""
        if key in self.months:
            return False
        self._months.append((key, [float(t) for t in t0s]))
        while len(self._months) > self.window_months:
            self._months.pop(0)
        return True

    def all_t0s(self):
        out = []
        for _, ts in self._months:
            out.extend(ts)
        return sorted(out)

    def to_dict(self):
        return {"window_months": self.window_months,
                "months": [[k, list(ts)] for k, ts in self._months]}

    @classmethod
    def from_dict(cls, d):
        buf = cls(int(d["window_months"]))
        buf._months = [(k, [float(t) for t in ts]) for k, ts in d["months"]]
        return buf


def incremental_update(net, fc, ds: DaDataset, cfg: TrainConfig,
                       buffer: ReplayBuffer, month_key: str, month_t0s,
                       updates: int):
    """Ingest one month and refresh the network on the rolling window.

    Re-ingesting a known month, an empty month, or zero updates all leave
    the parameters untouched. Returns (changed, curve).
    """
    if not month_t0s:
        warnings.warn(f"empty month {month_key!r}: nothing to ingest")
        return False, []
    if month_key in buffer.months:
        return False, []
    buffer.add_month(month_key, month_t0s)
    if updates == 0:
        return False, []
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(zlib.crc32(month_key.encode()),)))
    opt = AdamW(net.params)
    curve = _da_update_loop(net, fc, ds, cfg, buffer.all_t0s(), 2, updates,
                            opt, rng, lambda k: cfg.incremental_lr)
    return True, curve
