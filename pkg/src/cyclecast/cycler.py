"""The 6-hourly operational loop and its persistence.

Cold start from an all-zero state, then per cycle: gather the assimilation
window's observations, produce an analysis from the pending background,
launch a forecast, and hand the 6-hour step to the next cycle as its
background. The first SPIN_UP_CYCLES analyses are excluded from every
evaluation. Run directories and checkpoints make the whole chain resumable
and bit-reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import damodel as D
from . import dataio as IO
from . import fcmodel as F
from . import obsproc as OP
from . import satsim as S
from .grid import GridSpec
from .optim import AdamW, LrSchedule
from .state import StateCube, StateNorm

CADENCE_H = 6.0
SPIN_UP_CYCLES = 8  # two days at four cycles per day


def assimilation_window(t0: float):
    """Hourly frames [t0-3h, t0+4h) feeding the analysis at t0."""
    if t0 % CADENCE_H:
        raise ValueError(f"t0={t0} is off the 6 h cadence")
    return S.window_frames(t0)


@dataclass
class CycleState:
    """Everything cycle n+1 needs from cycle n."""

    analysis: StateCube
    background: StateCube
    time_h: float
    index: int
    rng_state: dict | None = None

    def __post_init__(self):
        if self.time_h % CADENCE_H:
            raise ValueError(f"cycle time {self.time_h} is off the cadence")
        if self.background.time_h != self.time_h:
            raise ValueError(f"background valid at {self.background.time_h}, "
                             f"cycle clock says {self.time_h}")
        if self.index < 0:
            raise ValueError("cycle index must be >= 0")


def cold_start(grid: GridSpec, t0: float = 0.0, seed: int = 0) -> CycleState:
    """All-zero analysis and background at the first cycle time."""
    if t0 % CADENCE_H:
        raise ValueError(f"t0={t0} is off the 6 h cadence")
    rng_state = np.random.default_rng(seed).bit_generator.state
    return CycleState(analysis=StateCube.zeros(grid, t0),
                      background=StateCube.zeros(grid, t0),
                      time_h=float(t0), index=0, rng_state=rng_state)


def exclude_spinup(seq):
    """Drop the first SPIN_UP_CYCLES entries of any per-cycle sequence."""
    return list(seq)[SPIN_UP_CYCLES:]


class ObsSource:
    """On-demand assimilation windows from a nature run."""

    def __init__(self, run, instruments, ro, pp: OP.ObsProcParams,
                 outages, obs_stats: OP.NormStats):
        self.run = run
        self.instruments = list(instruments)
        self.ro = ro
        self.pp = pp
        self.outages = outages
        self.obs_stats = obs_stats

    def window(self, t0):
        return OP.build_window(self.run, self.instruments, self.ro, t0,
                               self.pp, self.outages, self.obs_stats)


def run_cycle(state: CycleState, obs_source, net: D.DaNet,
              cascade: F.CascadeConfig, norm: StateNorm,
              rollout_steps: int = 0):
    """One DA + forecast cycle.

    Returns (next state, analysis, rollout or None). The next background is
    the rollout's first step whether or not the full rollout is kept, so
    thinning rollouts never changes the cycle chain.
    """
    t0 = state.time_h
    gridded, ro_frames = obs_source.window(t0)
    analysis = D.da_forward(net, state.background, list(gridded.values()),
                            ro_frames, norm)
    np.clip(analysis.field("r"), 0.0, 100.0, out=analysis.field("r"))
    seq = F.rollout(cascade, analysis, max(1, rollout_steps), norm)
    nxt = CycleState(analysis=analysis, background=seq[1],
                     time_h=t0 + CADENCE_H, index=state.index + 1,
                     rng_state=state.rng_state)
    return nxt, analysis, (seq if rollout_steps else None)


def run_cycles(state: CycleState, n_cycles: int, obs_source, net, cascade,
               norm, rollout_steps: int = 0, rollout_every: int = 1,
               run_dir: "RunDir | None" = None,
               collect_rollouts: bool = False):
    """Drive n consecutive cycles; rollouts launch every rollout_every-th
    cycle. Returns (final state, analyses, {cycle index: rollout})."""
    if rollout_every < 1:
        raise ValueError("rollout_every must be >= 1")
    analyses = []
    rollouts = {}
    for _ in range(n_cycles):
        idx = state.index
        launch = rollout_steps > 0 and idx % rollout_every == 0
        state, analysis, seq = run_cycle(state, obs_source, net, cascade,
                                         norm,
                                         rollout_steps if launch else 0)
        analyses.append(analysis)
        if run_dir is not None:
            run_dir.write_analysis(idx, analysis)
            if launch:
                run_dir.write_rollout(idx, seq)
        if launch and collect_rollouts:
            rollouts[idx] = seq
    return state, analyses, rollouts


# ---- Run directory ----

class RunDir:
    """Immutable per-run artifact tree: manifest, analyses, rollouts.

    Arrays are stored float32; reruns write fresh directories, never over
    an existing one.
    """

    def __init__(self, root):
        from pathlib import Path
        self.root = Path(root)
        man = self.root / "manifest.json"
        if not man.is_file():
            raise IO.DataError(f"no run manifest at {man}")
        import json
        doc = json.loads(man.read_text())
        if doc.get("format") != "cyclecast-run-1":
            raise IO.DataError(f"unrecognized run format in {man}")
        self.manifest = doc["meta"]

    @classmethod
    def create(cls, root, manifest: dict) -> "RunDir":
        from pathlib import Path
        import json
        root = Path(root)
        if root.exists():
            raise IO.DataError(f"run directory {root} already exists")
        root.mkdir(parents=True)
        doc = {"format": "cyclecast-run-1", "meta": dict(manifest)}
        (root / "manifest.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True))
        return cls(root)

    def _cycle_dir(self, kind, index):
        return self.root / kind / f"cyc{index:04d}"

    def write_analysis(self, index: int, cube: StateCube):
        IO.write_dataset(self._cycle_dir("analysis", index),
                         {"state": cube.data.astype(np.float32)},
                         {"time_h": cube.time_h, "index": index,
                          "grid": cube.grid.to_dict()},
                         timestamp=False)

    def read_analysis(self, index: int) -> StateCube:
        arrays, meta = IO.read_dataset(self._cycle_dir("analysis", index))
        grid = GridSpec.from_dict(meta["grid"])
        return StateCube(grid, arrays["state"].astype(np.float64),
                         float(meta["time_h"]))

    def write_rollout(self, index: int, seq):
        states = np.stack([s.data for s in seq]).astype(np.float32)
        times = np.array([s.time_h for s in seq], dtype=np.float64)
        IO.write_dataset(self._cycle_dir("rollout", index),
                         {"states": states, "times": times},
                         {"index": index, "grid": seq[0].grid.to_dict()},
                         timestamp=False)

    def read_rollout(self, index: int):
        arrays, meta = IO.read_dataset(self._cycle_dir("rollout", index))
        grid = GridSpec.from_dict(meta["grid"])
        return [StateCube(grid, s.astype(np.float64), float(t))
                for s, t in zip(arrays["states"], arrays["times"])]

    def list_analyses(self):
        return self._list("analysis")

    def list_rollouts(self):
        return self._list("rollout")

    def _list(self, kind):
        base = self.root / kind
        if not base.is_dir():
            return []
        return sorted(int(p.name[3:]) for p in base.iterdir()
                      if p.name.startswith("cyc"))


# ---- Checkpoints ----

def save_cycle_checkpoint(path, state: CycleState, arch_hash: str):
    meta = {"kind": "cycle", "arch_hash": arch_hash,
            "time_h": state.time_h, "index": state.index,
            "analysis_time_h": state.analysis.time_h,
            "rng_state": state.rng_state}
    IO.write_container(path, {"analysis": state.analysis.data,
                              "background": state.background.data}, meta)


def load_cycle_checkpoint(path, grid: GridSpec,
                          expect_arch: str | None = None) -> CycleState:
    arrays, meta = IO.read_container(path)
    if meta.get("kind") != "cycle":
        raise IO.DataError(f"{path} is a {meta.get('kind')!r} checkpoint, "
                           f"not a cycle state")
    if expect_arch is not None and meta["arch_hash"] != expect_arch:
        raise IO.DataError(f"checkpoint arch {meta['arch_hash']} does not "
                           f"match expected {expect_arch}")
    return CycleState(
        analysis=StateCube(grid, arrays["analysis"],
                           float(meta["analysis_time_h"])),
        background=StateCube(grid, arrays["background"],
                             float(meta["time_h"])),
        time_h=float(meta["time_h"]), index=int(meta["index"]),
        rng_state=meta.get("rng_state"))


def _pack_params(params, arrays, prefix):
    for k, t in params.items():
        arrays[f"{prefix}{k}"] = t.data


def _pack_opt(opt, arrays, meta):
    if opt is None:
        meta["opt_step_count"] = None
        return
    meta["opt_step_count"] = opt.step_count
    for k, a in opt.m.items():
        arrays[f"m.{k}"] = a
    for k, a in opt.v.items():
        arrays[f"v.{k}"] = a


def _unpack_opt(params, arrays, meta):
    if meta["opt_step_count"] is None:
        return None
    opt = AdamW(params)
    opt.step_count = int(meta["opt_step_count"])
    for k in params:
        opt.m[k] = arrays[f"m.{k}"].copy()
        opt.v[k] = arrays[f"v.{k}"].copy()
    return opt


def save_da_checkpoint(path, net: D.DaNet, opt, schedule: LrSchedule,
                       state_norm: StateNorm, obs_stats: OP.NormStats,
                       meta: dict | None = None):
    """Network + optimizer + schedule + both normalizations, float64."""
    arrays = {}
    _pack_params(net.params, arrays, "p.")
    head = {"kind": "da-model", "config": net.cfg.to_dict(),
            "arch_hash": net.cfg.arch_hash(),
            "schedule": dataclasses.asdict(schedule),
            "state_norm": state_norm.to_dict(),
            "obs_stats": obs_stats.to_dict(),
            "extra": dict(meta or {})}
    _pack_opt(opt, arrays, head)
    IO.write_container(path, arrays, head)


def load_da_checkpoint(path) -> dict:
    arrays, meta = IO.read_container(path)
    if meta.get("kind") != "da-model":
        raise IO.DataError(f"{path} is a {meta.get('kind')!r} checkpoint, "
                           f"not a da-model")
    cfg = D.DaNetConfig.from_dict(meta["config"])
    if cfg.arch_hash() != meta["arch_hash"]:
        raise IO.DataError("checkpoint arch hash does not match its config")
    net = D.DaNet(cfg, seed=0)
    for k, t in net.params.items():
        t.data = arrays[f"p.{k}"].copy()
    return {"net": net,
            "opt": _unpack_opt(net.params, arrays, meta),
            "schedule": LrSchedule(**meta["schedule"]),
            "state_norm": StateNorm.from_dict(meta["state_norm"]),
            "obs_stats": OP.NormStats.from_dict(meta["obs_stats"]),
            "meta": meta["extra"]}


def save_cascade_checkpoint(path, cascade: F.CascadeConfig):
    arrays = {}
    _pack_params(cascade.short.params, arrays, "s.")
    _pack_params(cascade.medium.params, arrays, "m.")
    meta = {"kind": "cascade", "k_handoff": cascade.k_handoff,
            "short": cascade.short.cfg.to_dict(),
            "medium": cascade.medium.cfg.to_dict()}
    IO.write_container(path, arrays, meta)


def load_cascade_checkpoint(path) -> F.CascadeConfig:
    arrays, meta = IO.read_container(path)
    if meta.get("kind") != "cascade":
        raise IO.DataError(f"{path} is a {meta.get('kind')!r} checkpoint, "
                           f"not a cascade")
    short = F.FcModel(F.FcConfig.from_dict(meta["short"]), seed=0)
    medium = F.FcModel(F.FcConfig.from_dict(meta["medium"]), seed=0)
    for k, t in short.params.items():
        t.data = arrays[f"s.{k}"].copy()
    for k, t in medium.params.items():
        t.data = arrays[f"m.{k}"].copy()
    return F.CascadeConfig(k_handoff=int(meta["k_handoff"]), short=short,
                           medium=medium)
