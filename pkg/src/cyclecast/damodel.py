"""Multi-branch assimilation network.

The background state is split into six cubes (surface + one per upper-air
variable), each feeding its own branch; every observation source feeds a
per-instrument branch. Branches follow a shared trajectory (downsample,
fusion, downsample, fusion, upsample, fusion) where fusion modules exchange
information between one background stream and one observation stream in a
round-robin schedule. Branch outputs are concatenated and a shared head
produces a normalized increment added to the background; three refinement
blocks polish the result. All output heads start at zero, so an untrained
network returns the background unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import obsproc as OP
from . import tensor as T
from .grid import GridSpec
from .layers import ParamStore
from .state import StateCube, StateNorm, n_channels

CUBE_NAMES = ("sfc", "z", "t", "u", "v", "r")


@dataclass
class BackgroundCubes:
    sfc: np.ndarray
    z: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r: np.ndarray


def split_background(state: StateCube) -> BackgroundCubes:
    """Partition the state channel-wise: five upper-air cubes + one surface."""
    L = state.grid.n_levels
    upper = [state.data[k * L:(k + 1) * L] for k in range(5)]
    return BackgroundCubes(state.data[5 * L:], *upper)


def reassemble(cubes: BackgroundCubes, grid: GridSpec, time_h: float) -> StateCube:
    data = np.concatenate([cubes.z, cubes.t, cubes.u, cubes.v, cubes.r, cubes.sfc])
    return StateCube(grid, data.copy(), time_h)


def cube_channels(grid: GridSpec):
    """Channel count per cube, in CUBE_NAMES order."""
    L = grid.n_levels
    return (5, L, L, L, L, L)


@dataclass(frozen=True)
class RoSpec:
    inst_id: str
    d_heights: int = 64
    e_features: int = 16


@dataclass(frozen=True)
class DaNetConfig:
    grid: GridSpec
    instruments: tuple  # ((inst_id, n_channels), ...)
    ro: RoSpec | None = None
    n_frames: int = 8
    c1: int = 32
    c2: int = 64
    use_background: bool = True

    def __post_init__(self):
        if self.grid.n_lat % 16 or self.grid.n_lon % 16:
            raise ValueError("grid dims must be divisible by 16 "
                             f"(got {self.grid.n_lat}x{self.grid.n_lon})")
        if not self.use_background and not self.instruments and self.ro is None:
            raise ValueError("network needs at least one input branch")
        ids = [i for i, _ in self.instruments]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instrument id in config")

    @property
    def state_channels(self):
        return n_channels(self.grid)

    def sounder_in_channels(self, nc):
        return self.n_frames * (nc + OP.N_ENC_CHANNELS) + self.n_frames

    @property
    def ro_in_channels(self):
        return self.n_frames * self.ro.e_features + self.n_frames

    @property
    def obs_ids(self):
        ids = [i for i, _ in self.instruments]
        if self.ro is not None:
            ids.append(self.ro.inst_id)
        return ids

    def arch_hash(self):
        payload = {"grid": [self.grid.n_lat, self.grid.n_lon,
                            list(self.grid.levels)],
                   "instruments": [list(p) for p in self.instruments],
                   "ro": None if self.ro is None else
                   [self.ro.inst_id, self.ro.d_heights, self.ro.e_features],
                   "n_frames": self.n_frames, "c1": self.c1, "c2": self.c2,
                   "use_background": self.use_background}
        return hashlib.sha256(json.dumps(payload, sort_keys=True)
                              .encode()).hexdigest()[:16]

    def to_dict(self):
        return {"grid": self.grid.to_dict(),
                "instruments": [list(p) for p in self.instruments],
                "ro": None if self.ro is None else
                {"inst_id": self.ro.inst_id, "d_heights": self.ro.d_heights,
                 "e_features": self.ro.e_features},
                "n_frames": self.n_frames, "c1": self.c1, "c2": self.c2,
                "use_background": self.use_background}

    @classmethod
    def from_dict(cls, d):
        ro = d.get("ro")
        return cls(grid=GridSpec.from_dict(d["grid"]),
                   instruments=tuple((str(i), int(n))
                                     for i, n in d["instruments"]),
                   ro=None if ro is None else RoSpec(**ro),
                   n_frames=int(d["n_frames"]), c1=int(d["c1"]),
                   c2=int(d["c2"]),
                   use_background=bool(d["use_background"]))


# ---- Fusion module: one dual-stream U-Net block ----

def build_fusion(store: ParamStore, prefix: str, c: int):
    """Shared-weight dual-stream U-Net with cross-stream bottleneck and two
    zero-initialized residual heads (increment for the background stream,
    bias for the observation stream)."""
    store.conv(f"{prefix}.d1a", c, c, 2)
    store.layer_norm(f"{prefix}.d1n", c)
    store.conv(f"{prefix}.d1b", c, c, 3)
    store.conv(f"{prefix}.d2a", 2 * c, c, 2)
    store.layer_norm(f"{prefix}.d2n", 2 * c)
    store.conv(f"{prefix}.d2b", 2 * c, 2 * c, 3)
    store.conv(f"{prefix}.u1a", 4 * c, 4 * c, 3)
    store.layer_norm(f"{prefix}.u1n", 4 * c)
    store.conv(f"{prefix}.u1b", 4 * c, 4 * c, 3)
    store.conv(f"{prefix}.u2a", 2 * c, 3 * c, 3)
    store.layer_norm(f"{prefix}.u2n", 2 * c)
    store.conv(f"{prefix}.u2b", 4 * c, 2 * c, 3)
    store.conv(f"{prefix}.inc", c, 3 * c, 1, zero=True)
    store.conv(f"{prefix}.bias", c, 3 * c, 1, zero=True)


def _conv(store, name, x, stride=1, padding=0):
    return T.conv2d(x, store[name + ".w"], store[name + ".b"],
                    stride=stride, padding=padding)


def _cln(store, name, x):
    return T.layer_norm(x, store[name + ".g"], store[name + ".b"], axis=1)


def _down(store, prefix, x):
    h = _conv(store, prefix + "a", x, stride=2)
    h = T.silu(_cln(store, prefix + "n", h))
    return _conv(store, prefix + "b", h, padding=1)


def _up(store, prefix, x):
    h = _conv(store, prefix + "a", x, padding=1)
    h = T.silu(_cln(store, prefix + "n", h))
    return T.pixel_shuffle(_conv(store, prefix + "b", h, padding=1), 2)


def fusion_forward(store: ParamStore, prefix: str, bg, obs):
    """(bg, obs) -> (bg + increment, obs + bias); spatial dims preserved."""
    bg, obs = T.as_tensor(bg), T.as_tensor(obs)
    if bg.shape[2:] != obs.shape[2:]:
        raise ValueError(f"spatial mismatch {bg.shape} vs {obs.shape}")
    skips, deep = [], []
    for stream in (bg, obs):
        s1 = _down(store, f"{prefix}.d1", stream)
        skips.append(s1)
        deep.append(_down(store, f"{prefix}.d2", s1))
    h = T.concat(deep, axis=1)                      # cross-stream bottleneck
    h = _up(store, f"{prefix}.u1", h)
    h = T.concat([h] + skips, axis=1)
    h = _up(store, f"{prefix}.u2", h)
    h = T.concat([h, bg, obs], axis=1)
    inc = _conv(store, f"{prefix}.inc", h)
    bias = _conv(store, f"{prefix}.bias", h)
    return bg + inc, obs + bias


# ---- Refinement block: one single-stream U-Net with a residual head ----

def build_refine(store: ParamStore, prefix: str, c_state: int, c1: int, c2: int):
    store.conv(f"{prefix}.d1a", c1, c_state, 2)
    store.layer_norm(f"{prefix}.d1n", c1)
    store.conv(f"{prefix}.d1b", c1, c1, 3)
    store.conv(f"{prefix}.d2a", c2, c1, 2)
    store.layer_norm(f"{prefix}.d2n", c2)
    store.conv(f"{prefix}.d2b", c2, c2, 3)
    store.conv(f"{prefix}.u1a", c2, c2, 3)
    store.layer_norm(f"{prefix}.u1n", c2)
    store.conv(f"{prefix}.u1b", 4 * c1, c2, 3)
    store.conv(f"{prefix}.u2a", c1, 2 * c1, 3)
    store.layer_norm(f"{prefix}.u2n", c1)
    store.conv(f"{prefix}.u2b", 4 * c1, c1, 3)
    store.conv(f"{prefix}.head", c_state, c1 + c_state, 1, zero=True)


def refine_forward(store: ParamStore, prefix: str, x):
    s1 = _down(store, f"{prefix}.d1", x)
    h = _down(store, f"{prefix}.d2", s1)
    h = _up(store, f"{prefix}.u1", h)
    h = T.concat([h, s1], axis=1)
    h = _up(store, f"{prefix}.u2", h)
    h = T.concat([h, x], axis=1)
    return x + _conv(store, f"{prefix}.head", h)


class DaNet:
    """Parameters plus forward pass; training code owns the update loop."""

    N_REFINE = 3
    N_FUSION_STAGES = 6

    def __init__(self, cfg: DaNetConfig, seed: int = 0):
        self.cfg = cfg
        store = ParamStore(np.random.default_rng(seed))
        c1, c2 = cfg.c1, cfg.c2
        n_streams = 0
        if cfg.use_background:
            for name, ch in zip(CUBE_NAMES, cube_channels(cfg.grid)):
                self._build_branch(store, f"bg.{name}", ch, c1, c2)
            n_streams += len(CUBE_NAMES)
        for iid, nc in cfg.instruments:
            self._build_branch(store, f"obs.{iid}", cfg.sounder_in_channels(nc),
                               c1, c2)
        n_streams += len(cfg.instruments)
        if cfg.ro is not None:
            store.linear("pillar.lin", cfg.ro.d_heights, cfg.ro.e_features)
            store.layer_norm("pillar.ln", cfg.ro.e_features)
            self._build_branch(store, f"obs.{cfg.ro.inst_id}",
                               cfg.ro_in_channels, c1, c2)
            n_streams += 1
        if cfg.use_background and cfg.obs_ids:
            for b in range(len(CUBE_NAMES)):
                for s in range(self.N_FUSION_STAGES):
                    build_fusion(store, f"fus.{b}.{s}", c2 if s in (2, 3) else c1)
        store.conv("head.c1", c2, n_streams * c1, 3)
        store.layer_norm("head.n", c2)
        store.conv("head.c2", 4 * c1, c2, 3)
        store.conv("head.out", cfg.state_channels, c1, 1, zero=True)
        for k in range(self.N_REFINE):
            build_refine(store, f"refine.{k}", cfg.state_channels, c1, c2)
        self.params = store
        if cfg.ro is not None:
            self.pillar_enc = OP.PillarEncoderParams(store, "pillar")

    @staticmethod
    def _build_branch(store, prefix, in_ch, c1, c2):
        store.conv(f"{prefix}.d1", c1, in_ch, 2)
        store.conv(f"{prefix}.d2", c2, c1, 2)
        store.conv(f"{prefix}.up", 4 * c1, c2, 3)

    def _branch_d1(self, prefix, x):
        return _conv(self.params, f"{prefix}.d1", x, stride=2)

    def _branch_d2(self, prefix, x):
        return _conv(self.params, f"{prefix}.d2", x, stride=2)

    def _branch_up(self, prefix, x):
        return T.pixel_shuffle(_conv(self.params, f"{prefix}.up", x, padding=1), 2)

    def _obs_input(self, iid, nc, gobs):
        """Stack one instrument's window (frames then masks) as (1,Cin,H,W)."""
        cfg = self.cfg
        if gobs is None:
            return T.as_tensor(np.zeros((1, cfg.sounder_in_channels(nc),
                                         cfg.grid.n_lat, cfg.grid.n_lon)))
        if gobs.data.shape[0] != cfg.n_frames:
            raise ValueError(f"instrument {iid!r}: {gobs.data.shape[0]} frames, "
                             f"config says {cfg.n_frames}")
        stacked, mask = OP.stack_window(gobs)
        return T.as_tensor(np.concatenate([stacked, mask])[None])

    def _ro_input(self, ro_frames):
        cfg = self.cfg
        if ro_frames is None:
            return T.as_tensor(np.zeros((1, cfg.ro_in_channels,
                                         cfg.grid.n_lat, cfg.grid.n_lon)))
        if len(ro_frames) != cfg.n_frames:
            raise ValueError(f"{len(ro_frames)} pillar frames, "
                             f"config says {cfg.n_frames}")
        feats, masks = [], []
        for batch in ro_frames:
            f, m = OP.encode_pillars(batch, cfg.grid, self.pillar_enc)
            feats.append(f)
            masks.append(m)
        stacked = T.concat(feats, axis=0)
        both = T.concat([stacked, T.as_tensor(np.stack(masks))], axis=0)
        return T.reshape(both, (1,) + both.shape)

    def forward_core(self, bg_norm, gridded, ro_frames=None):
        """Normalized background (C,H,W) + normalized obs -> normalized
        analysis as a (C,H,W) Tensor. gridded maps inst_id -> GriddedObs."""
        cfg = self.cfg
        known = set(cfg.obs_ids)
        for iid in gridded:
            if iid not in known:
                raise ValueError(f"instrument {iid!r} not in network config")
        bg_names, bg_feats = [], []
        if cfg.use_background:
            if bg_norm is None:
                raise ValueError("background required by this config")
            cube = StateCube(cfg.grid, np.asarray(bg_norm, dtype=float), 0.0)
            cubes = split_background(cube)
            for name in CUBE_NAMES:
                x = T.as_tensor(getattr(cubes, name)[None])
                bg_names.append(name)
                bg_feats.append(self._branch_d1(f"bg.{name}", x))
        obs_feats = {}
        for iid, nc in cfg.instruments:
            x = self._obs_input(iid, nc, gridded.get(iid))
            obs_feats[iid] = self._branch_d1(f"obs.{iid}", x)
        if cfg.ro is not None:
            x = self._ro_input(ro_frames)
            obs_feats[cfg.ro.inst_id] = self._branch_d1(f"obs.{cfg.ro.inst_id}", x)
        obs_order = [iid for iid in cfg.obs_ids]

        def fuse(stage):
            if not (cfg.use_background and obs_order):
                return
            for b, name in enumerate(bg_names):
                o = obs_order[(b + stage) % len(obs_order)]
                bg_feats[b], obs_feats[o] = fusion_forward(
                    self.params, f"fus.{b}.{stage}", bg_feats[b], obs_feats[o])

        fuse(0)
        fuse(1)
        bg_feats = [self._branch_d2(f"bg.{n}", f) for n, f in zip(bg_names, bg_feats)]
        obs_feats = {i: self._branch_d2(f"obs.{i}", f) for i, f in obs_feats.items()}
        fuse(2)
        fuse(3)
        bg_feats = [self._branch_up(f"bg.{n}", f) for n, f in zip(bg_names, bg_feats)]
        obs_feats = {i: self._branch_up(f"obs.{i}", f) for i, f in obs_feats.items()}
        fuse(4)
        fuse(5)

        streams = bg_feats + [obs_feats[i] for i in obs_order]
        h = T.concat(streams, axis=1)
        h = _conv(self.params, "head.c1", h, padding=1)
        h = T.silu(_cln(self.params, "head.n", h))
        h = T.pixel_shuffle(_conv(self.params, "head.c2", h, padding=1), 2)
        delta = _conv(self.params, "head.out", h)
        if cfg.use_background:
            analysis = T.as_tensor(np.asarray(bg_norm)[None]) + delta
        else:
            analysis = delta
        for k in range(self.N_REFINE):
            analysis = refine_forward(self.params, f"refine.{k}", analysis)
        return T.reshape(analysis, analysis.shape[1:])


def clone_net(net: DaNet) -> DaNet:
    """Independent copy with identical parameters."""
    out = DaNet(net.cfg, seed=0)
    for k, t in net.params.items():
        out.params[k].data = t.data.copy()
    return out


def da_forward(net: DaNet, background: StateCube, obs_list, ro_frames,
               state_norm: StateNorm) -> StateCube:
    """Physical background + normalized observations -> physical analysis.

    obs_list holds GriddedObs already normalized per instrument; ro_frames is
    a per-frame PillarBatch list (or None when the config has no occultation
    branch or the window saw no profiles).
    """
    gridded = {}
    for gobs in obs_list:
        if gobs.inst_id in gridded:
            raise ValueError(f"duplicate observations for {gobs.inst_id!r}")
        gridded[gobs.inst_id] = gobs
    bg_norm = state_norm.normalize(background.data) if net.cfg.use_background \
        else None
    out = net.forward_core(bg_norm, gridded, ro_frames)
    return StateCube(background.grid, state_norm.denormalize(out.data),
                     background.time_h)
