"""Run configuration: a YAML file describing one reproducible experiment.

A config is a plain mapping validated against a fixed schema. Every key has
a default, unknown keys are rejected by dotted path, and the validated tree
hashes to a canonical digest so artifacts can record exactly which
configuration produced them.
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

import cyclecast.damodel as D
import cyclecast.evalx as E
import cyclecast.fcmodel as F
import cyclecast.obsproc as OP
import cyclecast.optim as O
import cyclecast.satsim as S
import cyclecast.training as T
import cyclecast.world as W
from cyclecast.grid import GridSpec


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}" if path else msg)


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


DEFAULTS = {
    "run_name": "run",
    "seed": 0,
    "frames": 8,
    "cadence_h": 6.0,
    "grid": {
        "n_lat": 32,
        "n_lon": 64,
        "levels": [100.0, 300.0, 500.0, 700.0, 900.0],
    },
    "world": {
        "t_start": 0.0,
        "t_end": 360.0,
        "year_days": 12.0,
    },
    "instruments": "default",
    "ro": {
        "enabled": True,
        "fraction_per_window": 0.006,
        "n_native_heights": 24,
        "noise_n": 0.3,
        "scale_height_km": 7.5,
    },
    "obsproc": {
        "qc_min_k": 50.0,
        "qc_max_k": 350.0,
        "d_heights": 64,
        "e_features": 16,
        "ro_scale": 360.0,
    },
    "model": {
        "c1": 32,
        "c2": 64,
        "use_background": True,
    },
    "fc": {
        "width": 48,
        "n_blocks": 3,
    },
    "cascade": {
        "k_handoff": 16,
    },
    "training": {
        "fc_updates": 200,
        "stage1_updates": 300,
        "stage2_updates": 0,
        "t_joint": 1,
        "stage1_max_lead_h": 120.0,
        "stage2_max_lead_h": 72.0,
        "incremental_lr": 5e-5,
        "lr": {
            "start": 1e-8,
            "peak": 2e-3,
            "floor": 1e-8,
            "warmup_steps": 500,
            "total_steps": 24000,
        },
        "train_span": [48.0, 240.0],
        "val_span": [246.0, 276.0],
    },
    "cycle": {
        "t0": 288.0,
        "n_cycles": 8,
        "rollout_steps": 4,
        "rollout_every": 1,
    },
    "eval": {
        "leads_h": [0.0, 6.0, 12.0, 18.0, 24.0],
        "clim_span": [0.0, 282.0],
        "clim_hours": [0.0, 6.0, 12.0, 18.0],
    },
    "finetune": {
        "max_len": 12,
        "updates_per_stage": 500,
        "lr": 1e-7,
    },
    "ablate": {
        "months": 2,
        "month_hours": 48.0,
        "updates_per_month": 50,
        "finetune_updates_per_stage": 50,
        "finetune_max_len": 4,
        "finetune_lr": 1e-4,
        "bias_instrument": None,
        "bias_k": 0.0,
    },
    "regions": [
        {"name": "central-africa", "lat_s": -10.0, "lat_n": 10.0,
         "lon_w": 15.0, "lon_e": 35.0},
    ],
    "paths": {
        "runs_root": None,
    },
}

_INSTRUMENT_FIELDS = {
    "id": "",
    "lst_hours": 0.0,
    "period_min": 100.0,
    "incl_deg": 98.0,
    "phase0": 0.0,
    "swath_half_width": 0,
    "scan_max_deg": 45.0,
    "noise_k": 0.0,
    "bias_b0": 0.0,
    "bias_b1": 0.0,
    "track_step_min": 1.5,
    "channels": None,
}
_INSTRUMENT_REQUIRED = ("id", "lst_hours", "swath_half_width", "channels")

_CHANNEL_FIELDS = {
    "target": "",
    "peak_level": 0,
    "width": 1.0,
    "gamma": 0.0,
    "t_width": 1.6,
}
_CHANNEL_REQUIRED = ("target", "peak_level", "width", "gamma")

_REGION_FIELDS = {
    "name": "",
    "lat_s": 0.0,
    "lat_n": 0.0,
    "lon_w": 0.0,
    "lon_e": 0.0,
}


def _coerce_leaf(default, value, path):
    """Type-check one scalar/list leaf against its default, normalizing
    ints to floats where the schema expects a float."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _fail(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}")
        return value
    if default is None:
        if value is not None and not isinstance(value, str):
            _fail(path, f"expected a string or null, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            _fail(path, f"expected a list, got {value!r}")
        out = []
        for i, item in enumerate(value):
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                _fail(f"{path}[{i}]", f"expected a number, got {item!r}")
            out.append(float(item))
        return out
    raise AssertionError(f"unhandled schema leaf at {path}")


def _validate_record(fields, required, given, path):
    if not isinstance(given, dict):
        _fail(path, f"expected a mapping, got {given!r}")
    for key in given:
        if key not in fields:
            _fail(_join(path, key), "unknown key")
    for key in required:
        if key not in given:
            _fail(_join(path, key), "missing required key")
    out = {}
    for key, default in fields.items():
        if key == "channels":
            continue
        if key in given:
            out[key] = _coerce_leaf(default, given[key], _join(path, key))
        else:
            out[key] = default
    return out


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        _fail(path, f"expected a mapping, got {given!r}")
    for key in given:
        if key not in defaults:
            _fail(_join(path, key), "unknown key")
    out = {}
    for key, default in defaults.items():
        sub = _join(path, key)
        if key not in given:
            out[key] = copy.deepcopy(default)
        elif path == "" and key == "instruments":
            out[key] = _norm_instruments(given[key], sub)
        elif path == "" and key == "regions":
            out[key] = _norm_regions(given[key], sub)
        elif isinstance(default, dict):
            out[key] = _merge(default, given[key], sub)
        else:
            out[key] = _coerce_leaf(default, given[key], sub)
    return out


def _norm_instruments(value, path):
    if value == "default":
        return "default"
    if not isinstance(value, list) or not value:
        _fail(path, 'expected "default" or a nonempty list')
    out = []
    for i, item in enumerate(value):
        sub = f"{path}[{i}]"
        rec = _validate_record(_INSTRUMENT_FIELDS, _INSTRUMENT_REQUIRED,
                               item, sub)
        chans = item["channels"]
        if not isinstance(chans, list) or not chans:
            _fail(f"{sub}.channels", "expected a nonempty list")
        rec["channels"] = [
            _validate_record(_CHANNEL_FIELDS, _CHANNEL_REQUIRED, c,
                             f"{sub}.channels[{j}]")
            for j, c in enumerate(chans)
        ]
        out.append(rec)
    return out


def _norm_regions(value, path):
    if not isinstance(value, list):
        _fail(path, "expected a list")
    return [
        _validate_record(_REGION_FIELDS, tuple(_REGION_FIELDS), item,
                         f"{path}[{i}]")
        for i, item in enumerate(value)
    ]


def _check_span(span, cadence, path):
    if len(span) != 2:
        _fail(path, "expected [start_h, end_h]")
    a, b = span
    if a < 0 or b <= a:
        _fail(path, f"need 0 <= start < end, got {span}")
    if a % cadence or b % cadence:
        _fail(path, f"bounds must be multiples of {cadence} h")


def _semantic_checks(cfg):
    if not cfg["run_name"] or os.sep in cfg["run_name"]:
        _fail("run_name", f"invalid run name {cfg['run_name']!r}")
    if cfg["seed"] < 0:
        _fail("seed", "must be >= 0")
    if cfg["frames"] != 8:
        _fail("frames", "only 8-frame observation windows are supported")
    cadence = cfg["cadence_h"]
    if cadence != 6.0:
        _fail("cadence_h", "only the 6 h cycling cadence is supported")

    g = cfg["grid"]
    for key in ("n_lat", "n_lon"):
        if g[key] < 16 or g[key] % 16:
            _fail(f"grid.{key}", f"must be a positive multiple of 16, "
                                 f"got {g[key]}")
    lv = g["levels"]
    if not lv or any(x <= 0 for x in lv) or any(
            b <= a for a, b in zip(lv, lv[1:])):
        _fail("grid.levels", "must be positive and strictly increasing")

    w = cfg["world"]
    for key in ("t_start", "t_end"):
        if w[key] != int(w[key]) or w[key] < 0:
            _fail(f"world.{key}", "must be a nonnegative whole hour")
    if w["t_end"] <= w["t_start"]:
        _fail("world.t_end", "must be after world.t_start")
    if w["year_days"] < 1 or w["year_days"] != int(w["year_days"]):
        _fail("world.year_days", "must be a positive whole number of days")

    insts = cfg["instruments"]
    if insts != "default":
        seen = set()
        for i, rec in enumerate(insts):
            p = f"instruments[{i}]"
            if not rec["id"]:
                _fail(f"{p}.id", "must be nonempty")
            if rec["id"] in seen:
                _fail(p, f"duplicate instrument id {rec['id']!r}")
            seen.add(rec["id"])
            if not 0 <= rec["lst_hours"] < 24:
                _fail(f"{p}.lst_hours", "must be in [0, 24)")
            if rec["period_min"] <= 0:
                _fail(f"{p}.period_min", "must be > 0")
            if rec["swath_half_width"] < 0:
                _fail(f"{p}.swath_half_width", "must be >= 0")
            if rec["scan_max_deg"] <= 0:
                _fail(f"{p}.scan_max_deg", "must be > 0")
            if rec["noise_k"] < 0:
                _fail(f"{p}.noise_k", "must be >= 0")
            if rec["track_step_min"] <= 0:
                _fail(f"{p}.track_step_min", "must be > 0")
            for j, c in enumerate(rec["channels"]):
                q = f"{p}.channels[{j}]"
                if c["target"] not in ("t", "r"):
                    _fail(f"{q}.target", f'must be "t" or "r", '
                                         f"got {c['target']!r}")
                if not 0 <= c["peak_level"] < len(lv):
                    _fail(f"{q}.peak_level",
                          f"must index a grid level (0..{len(lv) - 1})")
                if c["width"] <= 0 or c["t_width"] <= 0:
                    _fail(f"{q}.width", "widths must be > 0")
                if c["gamma"] < 0:
                    _fail(f"{q}.gamma", "must be >= 0")

    ro = cfg["ro"]
    if not 0 < ro["fraction_per_window"] <= 1:
        _fail("ro.fraction_per_window", "must be in (0, 1]")
    if ro["n_native_heights"] < 2:
        _fail("ro.n_native_heights", "must be >= 2")
    if ro["noise_n"] < 0:
        _fail("ro.noise_n", "must be >= 0")
    if ro["scale_height_km"] <= 0:
        _fail("ro.scale_height_km", "must be > 0")

    op = cfg["obsproc"]
    if op["qc_max_k"] <= op["qc_min_k"]:
        _fail("obsproc.qc_max_k", "must be above obsproc.qc_min_k")
    if op["d_heights"] < 2:
        _fail("obsproc.d_heights", "must be >= 2")
    if op["e_features"] < 1:
        _fail("obsproc.e_features", "must be >= 1")
    if op["ro_scale"] <= 0:
        _fail("obsproc.ro_scale", "must be > 0")

    for key in ("c1", "c2"):
        if cfg["model"][key] < 1:
            _fail(f"model.{key}", "must be >= 1")
    for key in ("width", "n_blocks"):
        if cfg["fc"][key] < 1:
            _fail(f"fc.{key}", "must be >= 1")
    if cfg["cascade"]["k_handoff"] < 1:
        _fail("cascade.k_handoff", "must be >= 1")

    tr = cfg["training"]
    for key in ("fc_updates", "stage1_updates", "stage2_updates"):
        if tr[key] < 0:
            _fail(f"training.{key}", "must be >= 0")
    if tr["t_joint"] < 1:
        _fail("training.t_joint", "must be >= 1")
    for key in ("stage1_max_lead_h", "stage2_max_lead_h"):
        if tr[key] < cadence:
            _fail(f"training.{key}", f"must be >= {cadence}")
    if tr["incremental_lr"] <= 0:
        _fail("training.incremental_lr", "must be > 0")
    lr = tr["lr"]
    for key in ("start", "peak", "floor"):
        if lr[key] <= 0:
            _fail(f"training.lr.{key}", "must be > 0")
    if lr["warmup_steps"] < 1:
        _fail("training.lr.warmup_steps", "must be >= 1")
    if lr["total_steps"] < lr["warmup_steps"]:
        _fail("training.lr.total_steps", "must be >= warmup_steps")
    _check_span(tr["train_span"], cadence, "training.train_span")
    _check_span(tr["val_span"], cadence, "training.val_span")

    cy = cfg["cycle"]
    if cy["t0"] < 0 or cy["t0"] % cadence:
        _fail("cycle.t0", f"must be a nonnegative multiple of {cadence} h")
    if cy["n_cycles"] < 1:
        _fail("cycle.n_cycles", "must be >= 1")
    if cy["rollout_steps"] < 0:
        _fail("cycle.rollout_steps", "must be >= 0")
    if cy["rollout_every"] < 1:
        _fail("cycle.rollout_every", "must be >= 1")

    ev = cfg["eval"]
    leads = ev["leads_h"]
    if not leads or leads[0] < 0:
        _fail("eval.leads_h", "must be a nonempty list of lead hours")
    if len(leads) > 1:
        step = leads[1] - leads[0]
        if step <= 0 or any(
                abs((b - a) - step) > 1e-9 for a, b in zip(leads, leads[1:])):
            _fail("eval.leads_h", "must be a uniformly spaced ladder")
    _check_span(ev["clim_span"], cadence, "eval.clim_span")
    if not ev["clim_hours"] or any(
            not 0 <= h < 24 for h in ev["clim_hours"]):
        _fail("eval.clim_hours", "must be hours of day in [0, 24)")

    ft = cfg["finetune"]
    if ft["max_len"] < 2:
        _fail("finetune.max_len", "must be >= 2")
    if ft["updates_per_stage"] < 1:
        _fail("finetune.updates_per_stage", "must be >= 1")
    if ft["lr"] <= 0:
        _fail("finetune.lr", "must be > 0")

    ab = cfg["ablate"]
    if ab["months"] < 1:
        _fail("ablate.months", "must be >= 1")
    if ab["month_hours"] <= 0 or ab["month_hours"] % cadence:
        _fail("ablate.month_hours", f"must be a positive multiple "
                                    f"of {cadence} h")
    if ab["updates_per_month"] < 1:
        _fail("ablate.updates_per_month", "must be >= 1")
    if ab["finetune_updates_per_stage"] < 1:
        _fail("ablate.finetune_updates_per_stage", "must be >= 1")
    if ab["finetune_max_len"] < 2:
        _fail("ablate.finetune_max_len", "must be >= 2")
    if ab["finetune_lr"] <= 0:
        _fail("ablate.finetune_lr", "must be > 0")

    names = set()
    for i, rec in enumerate(cfg["regions"]):
        p = f"regions[{i}]"
        if not rec["name"]:
            _fail(f"{p}.name", "must be nonempty")
        if rec["name"] in names:
            _fail(p, f"duplicate region name {rec['name']!r}")
        names.add(rec["name"])
        if rec["lat_s"] >= rec["lat_n"]:
            _fail(f"{p}.lat_s", "must be below lat_n")

    root = cfg["paths"]["runs_root"]
    if root is not None and not root:
        _fail("paths.runs_root", "must be nonempty or null")


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration tree plus typed builders for each
    component. `data` is canonical: every key present, numbers normalized."""

    data: dict

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def run_name(self) -> str:
        return self.data["run_name"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def cadence_h(self) -> float:
        return self.data["cadence_h"]

    def grid(self) -> GridSpec:
        g = self.data["grid"]
        return GridSpec(g["n_lat"], g["n_lon"], tuple(g["levels"]))

    def world_params(self) -> W.WorldParams:
        w = self.data["world"]
        return W.desk_params(seed=self.seed, grid=self.grid(),
                             year_days=w["year_days"])

    def instruments(self) -> list:
        spec = self.data["instruments"]
        if spec == "default":
            return list(S.desk_instruments(self.grid()))
        out = []
        for rec in spec:
            channels = tuple(
                S.ChannelSpec(target=c["target"], peak_level=c["peak_level"],
                              width=c["width"], gamma=c["gamma"],
                              t_width=c["t_width"])
                for c in rec["channels"])
            orbit = S.OrbitSpec(lst_hours=rec["lst_hours"],
                                period_min=rec["period_min"],
                                incl_deg=rec["incl_deg"],
                                phase0=rec["phase0"])
            out.append(S.InstrumentSpec(
                inst_id=rec["id"], orbit=orbit, channels=channels,
                swath_half_width=rec["swath_half_width"],
                scan_max_deg=rec["scan_max_deg"], noise_k=rec["noise_k"],
                bias_b0=rec["bias_b0"], bias_b1=rec["bias_b1"],
                track_step_min=rec["track_step_min"]))
        return out

    def ro_params(self) -> S.RoParams | None:
        ro = self.data["ro"]
        if not ro["enabled"]:
            return None
        return S.RoParams(fraction_per_window=ro["fraction_per_window"],
                          n_native_heights=ro["n_native_heights"],
                          noise_n=ro["noise_n"],
                          scale_height_km=ro["scale_height_km"])

    def obsproc_params(self) -> OP.ObsProcParams:
        op = self.data["obsproc"]
        return OP.ObsProcParams(qc_min_k=op["qc_min_k"],
                                qc_max_k=op["qc_max_k"],
                                d_heights=op["d_heights"],
                                e_features=op["e_features"],
                                ro_scale=op["ro_scale"])

    def danet_config(self) -> D.DaNetConfig:
        m = self.data["model"]
        insts = tuple((i.inst_id, len(i.channels))
                      for i in self.instruments())
        ro = self.ro_params()
        ro_spec = None
        if ro is not None:
            op = self.data["obsproc"]
            ro_spec = D.RoSpec(inst_id=ro.inst_id,
                               d_heights=op["d_heights"],
                               e_features=op["e_features"])
        return D.DaNetConfig(grid=self.grid(), instruments=insts,
                             ro=ro_spec, n_frames=self.data["frames"],
                             c1=m["c1"], c2=m["c2"],
                             use_background=m["use_background"])

    def fc_config(self) -> F.FcConfig:
        f = self.data["fc"]
        return F.FcConfig(grid=self.grid(),
                          year_days=self.data["world"]["year_days"],
                          width=f["width"], n_blocks=f["n_blocks"])

    def lr_schedule(self) -> O.LrSchedule:
        lr = self.data["training"]["lr"]
        return O.LrSchedule(start=lr["start"], peak=lr["peak"],
                            floor=lr["floor"],
                            warmup_steps=lr["warmup_steps"],
                            total_steps=lr["total_steps"])

    def train_config(self) -> T.TrainConfig:
        tr = self.data["training"]
        return T.TrainConfig(stage1_updates=tr["stage1_updates"],
                             stage2_updates=tr["stage2_updates"],
                             t_joint=tr["t_joint"],
                             stage1_max_lead_h=tr["stage1_max_lead_h"],
                             stage2_max_lead_h=tr["stage2_max_lead_h"],
                             schedule=self.lr_schedule(),
                             incremental_lr=tr["incremental_lr"],
                             seed=self.seed)

    def regions(self) -> list:
        return [E.RegionBox(name=r["name"], lat_s=r["lat_s"],
                            lat_n=r["lat_n"], lon_w=r["lon_w"],
                            lon_e=r["lon_e"])
                for r in self.data["regions"]]

    def t0_ladder(self, span) -> list:
        a, b = span
        n = int(round((b - a) / self.cadence_h))
        return [a + self.cadence_h * i for i in range(n + 1)]

    @property
    def train_t0s(self) -> list:
        return self.t0_ladder(self.data["training"]["train_span"])

    @property
    def val_t0s(self) -> list:
        return self.t0_ladder(self.data["training"]["val_span"])

    def runs_root(self) -> Path:
        root = self.data["paths"]["runs_root"]
        if root is None:
            root = os.environ.get("CYCLECAST_RUNS") or "runs"
        return Path(root)

    def run_dir(self, root=None) -> Path:
        base = Path(root) if root is not None else self.runs_root()
        return base / self.run_name


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        _fail("", f"config top level must be a mapping, got {type(raw).__name__}")
    data = _merge(DEFAULTS, raw, "")
    _semantic_checks(data)
    return RunConfig(data=data)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)
