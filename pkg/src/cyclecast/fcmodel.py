"""Autoregressive forecast model: one residual conv step network per cascade
member, advancing the state 6 hours per call.

The step network sees the z-scored state plus static channels (orography
analog, horizontal position encodings, hour of day, day of year, step index)
and predicts a normalized increment; the physical update is
state + std * increment, so a zero-initialized head gives an exact
persistence forecast. A Short and a Medium member form a cascade with a
configurable handoff step K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .grid import GridSpec
from .layers import ParamStore
from .state import StateCube, StateNorm, n_channels

N_STATIC_CHANNELS = 9
STEP_SCALE = 16.0  # step index channel is step / STEP_SCALE
STEP_HOURS = 6.0


def static_fields(grid: GridSpec, time_h: float, step: int,
                  year_days: float) -> np.ndarray:
    """(9, H, W): orography analog, sin(lat), sin/cos(lon), hour-of-day and
    day-of-year phase pairs, and the normalized step index."""
    lat = np.radians(grid.lats)[:, None] * np.ones((1, grid.n_lon))
    lon = np.radians(grid.lons)[None, :] * np.ones((grid.n_lat, 1))
    orog = np.sin(3.0 * lon) * np.cos(2.0 * lat) \
        + 0.5 * np.sin(5.0 * lon + 1.0) * np.cos(lat)
    hour = 2.0 * np.pi * (time_h % 24.0) / 24.0
    doy = 2.0 * np.pi * ((time_h / 24.0) % year_days) / year_days
    const = np.ones_like(orog)
    return np.stack([orog, np.sin(lat), np.sin(lon), np.cos(lon),
                     np.sin(hour) * const, np.cos(hour) * const,
                     np.sin(doy) * const, np.cos(doy) * const,
                     (step / STEP_SCALE) * const])


@dataclass(frozen=True)
class FcConfig:
    grid: GridSpec
    year_days: float = 12.0
    width: int = 48
    n_blocks: int = 3

    def to_dict(self):
        return {"grid": self.grid.to_dict(), "year_days": self.year_days,
                "width": self.width, "n_blocks": self.n_blocks}

    @classmethod
    def from_dict(cls, d):
        return cls(grid=GridSpec.from_dict(d["grid"]),
                   year_days=float(d["year_days"]), width=int(d["width"]),
                   n_blocks=int(d["n_blocks"]))


class FcModel:
    """Step-network parameters plus the differentiable core."""

    def __init__(self, cfg: FcConfig, seed: int = 0):
        self.cfg = cfg
        store = ParamStore(np.random.default_rng(seed))
        C = n_channels(cfg.grid)
        store.conv("in", cfg.width, C + N_STATIC_CHANNELS, 3)
        for k in range(cfg.n_blocks):
            store.layer_norm(f"blk{k}.n", cfg.width)
            store.conv(f"blk{k}.c", cfg.width, cfg.width, 3)
        store.layer_norm("out.n", cfg.width)
        store.conv("out.c", C, cfg.width, 3, zero=True)
        self.params = store

    def delta_core(self, state_norm, statics: np.ndarray):
        """Normalized state + statics -> normalized increment Tensor (C,H,W).

        state_norm may be an array or a Tensor (gradients then flow through
        the input, e.g. for joint losses over a frozen forecast model)."""
        p = self.params
        x = T.concat([T.as_tensor(state_norm), T.as_tensor(statics)], axis=0)
        x = T.reshape(x, (1,) + x.shape)
        h = T.conv2d(x, p["in.w"], p["in.b"], padding=1)
        for k in range(self.cfg.n_blocks):
            a = T.silu(T.layer_norm(h, p[f"blk{k}.n.g"], p[f"blk{k}.n.b"], axis=1))
            h = h + T.conv2d(a, p[f"blk{k}.c.w"], p[f"blk{k}.c.b"], padding=1)
        a = T.silu(T.layer_norm(h, p["out.n.g"], p["out.n.b"], axis=1))
        out = T.conv2d(a, p["out.c.w"], p["out.c.b"], padding=1)
        return T.reshape(out, out.shape[1:])


def clone_model(model: FcModel) -> FcModel:
    """Independent copy with identical parameters."""
    out = FcModel(model.cfg, seed=0)
    for k, t in model.params.items():
        out.params[k].data = t.data.copy()
    return out


def clone_cascade(cascade: "CascadeConfig") -> "CascadeConfig":
    return CascadeConfig(k_handoff=cascade.k_handoff,
                         short=clone_model(cascade.short),
                         medium=clone_model(cascade.medium))


def fc_step(model: FcModel, state: StateCube, norm: StateNorm,
            step: int = 1) -> StateCube:
    """Advance 6 hours: state + std * delta(normalized state, statics)."""
    statics = static_fields(model.cfg.grid, state.time_h, step,
                            model.cfg.year_days)
    delta = model.delta_core(norm.normalize(state.data), statics)
    out = state.data + norm.std[:, None, None] * delta.data
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(
            f"non-finite forecast at t={state.time_h} step={step}")
    return StateCube(state.grid, out, state.time_h + STEP_HOURS)


@dataclass
class CascadeConfig:
    k_handoff: int
    short: FcModel
    medium: FcModel

    def __post_init__(self):
        if self.k_handoff < 1:
            raise ValueError("handoff step must be >= 1")


def rollout(cascade: CascadeConfig, init: StateCube, steps: int,
            norm: StateNorm):
    """[init, +6h, +12h, ...]: Short for steps 1..K, Medium beyond."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    seq = [init]
    current = init
    for i in range(1, steps + 1):
        member = cascade.short if i <= cascade.k_handoff else cascade.medium
        current = fc_step(member, current, norm, step=i)
        seq.append(current)
    return seq
