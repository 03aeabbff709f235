"""Layer catalogue and parameter plumbing on top of the autodiff core.

LayerSpec/layer_forward give a flat, data-driven view of the supported layer
kinds; the network modules call the tensor ops directly but share the same
initializers and the ParamStore naming scheme (dotted paths, one Tensor per
parameter).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LAYER_KINDS = ("conv2d", "linear", "layer-norm", "silu", "pixel-shuffle",
               "concat", "bilinear-resize", "nearest-resize")


@dataclass
class LayerSpec:
    kind: str
    weight: object = None
    bias: object = None
    gain: object = None
    stride: int = 1
    padding: int = 0
    factor: int = 2
    axis: int = 1
    out_rows: int | None = None


def layer_forward(spec: LayerSpec, x):
    """Apply one layer. x is a Tensor, or a list of Tensors for concat."""
    k = spec.kind
    if k == "conv2d":
        return T.conv2d(x, spec.weight, spec.bias, stride=spec.stride, padding=spec.padding)
    if k == "linear":
        y = T.matmul(x, T.as_tensor(spec.weight))
        return y + T.as_tensor(spec.bias) if spec.bias is not None else y
    if k == "layer-norm":
        return T.layer_norm(x, spec.gain, spec.bias, axis=spec.axis)
    if k == "silu":
        return T.silu(x)
    if k == "pixel-shuffle":
        return T.pixel_shuffle(x, spec.factor)
    if k == "concat":
        return T.concat(list(x), axis=spec.axis)
    if k == "bilinear-resize":
        return T.bilinear_resize_rows(x, spec.out_rows)
    if k == "nearest-resize":
        return T.nearest_upsample(x, spec.factor)
    raise ValueError(f"unknown layer kind {k!r}; supported: {LAYER_KINDS}")


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore(dict):
    """dict[str, Tensor] with helpers that create initialized parameters.

    Names are dotted paths ('branch.t.down1.conv1.w'). Convolution and linear
    weights use fan-in scaled uniform init; layer-norm starts at gain 1 bias 0;
    zero=True zero-initializes (used for the residual output heads).
    """

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.rng = rng

    def _add(self, name, data):
        if name in self:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.Tensor(data, requires_grad=True, name=name)
        self[name] = t
        return t

    def conv(self, name, c_out, c_in, kh, kw=None, zero=False):
        kw = kh if kw is None else kw
        fan_in = c_in * kh * kw
        w = np.zeros((c_out, c_in, kh, kw)) if zero else \
            fan_in_uniform(self.rng, (c_out, c_in, kh, kw), fan_in)
        return self._add(name + ".w", w), self._add(name + ".b", np.zeros(c_out))

    def linear(self, name, d_in, d_out, zero=False):
        w = np.zeros((d_in, d_out)) if zero else \
            fan_in_uniform(self.rng, (d_in, d_out), d_in)
        return self._add(name + ".w", w), self._add(name + ".b", np.zeros(d_out))

    def layer_norm(self, name, n):
        return self._add(name + ".g", np.ones(n)), self._add(name + ".b", np.zeros(n))


def count_params(params: dict) -> int:
    return int(sum(t.data.size for t in params.values()))


def set_requires_grad(params: dict, flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag
        t.needs_grad = flag
