"""AdamW with decoupled weight decay, and the warmup-cosine learning rate law.

Update rule per parameter p with gradient g at step t (1-based):
    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g^2
    p <- p - lr * ( (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps) + wd*p )
The decay term multiplies the raw parameter, never the gradient moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class AdamW:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def step(self, grads, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient for parameter {name!r} at step {t}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from `start` to `peak`, then cosine anneal to `floor`."""
    start: float = 1e-8
    peak: float = 2e-3
    floor: float = 1e-8
    warmup_steps: int = 500
    total_steps: int = 24000


def lr_at(sched: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step <= sched.warmup_steps:
        frac = step / sched.warmup_steps if sched.warmup_steps else 1.0
        return sched.start + (sched.peak - sched.start) * frac
    if step >= sched.total_steps:
        return sched.floor
    span = sched.total_steps - sched.warmup_steps
    phase = math.pi * (step - sched.warmup_steps) / span
    return sched.floor + (sched.peak - sched.floor) * 0.5 * (1.0 + math.cos(phase))
