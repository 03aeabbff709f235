"""Reverse-mode automatic differentiation over dense numpy float64 arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the recorded graph once, in topological order, accumulating vector-Jacobian
products. All arithmetic runs in float64; 32-bit data is promoted on
construction. Per-parent vjp callables let the walk skip gradient work for
frozen subgraphs (a parent whose subtree contains no trainable leaf is never
visited and its vjp is never evaluated).
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "name", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._vjps = _vjps
        self.needs_grad = self.requires_grad or any(p.needs_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape) -> Array:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data, parents, vjps, name=None):
    return Tensor(data, _parents=tuple(parents), _vjps=tuple(vjps), name=name)


# ---- Elementwise and reduction ops ----

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def abs_(x):
    x = as_tensor(x)
    # np.sign(0) == 0: the L1 subgradient at an exact tie is zero
    return _node(np.abs(x.data), (x,), (lambda g: g * np.sign(x.data),))


def silu(x):
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _node(x.data * s, (x,), (lambda g: g * (s * (1.0 + x.data * (1.0 - s))),))


def sum_(x):
    x = as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,),
                 (lambda g: np.broadcast_to(g, x.shape).copy() if g.shape != x.shape else g,))


# ---- Linear algebra ----

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul expects (N,D)@(D,E), got {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


# ---- Convolution ----

def _conv_cols(xp: Array, kh: int, kw: int, sh: int, sw: int) -> Array:
    """im2col: padded (B,C,Hp,Wp) -> (B*Ho*Wo, C*kh*kw) plus (Ho, Wo)."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]
    b, c, ho, wo = view.shape[:4]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, zero padding, NCHW layout."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    co, ci, kh, kw = w.shape
    bt = as_tensor(b) if b is not None else None

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {(kh, kw)}")
    cols, ho, wo = _conv_cols(xp, kh, kw, sh, sw)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(x.shape[0], ho, wo, co).transpose(0, 3, 1, 2)
    if bt is not None:
        out = out + bt.data[None, :, None, None]

    bsz = x.shape[0]
    memo = {}

    def gmat(g):
        if "g" not in memo:
            memo["g"] = g.transpose(0, 2, 3, 1).reshape(-1, co)
        return memo["g"]

    def vjp_x(g):
        dcols = gmat(g) @ wmat  # (B*Ho*Wo, C*kh*kw)
        dcols = dcols.reshape(bsz, ho, wo, ci, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + (ho - 1) * sh + 1:sh, j:j + (wo - 1) * sw + 1:sw] += dcols[..., i, j]
        if ph or pw:
            return dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
        return dxp

    def vjp_w(g):
        c2, _, _ = _conv_cols(xp, kh, kw, sh, sw)  # recomputed: cheaper than caching
        return (gmat(g).T @ c2).reshape(w.shape)

    parents = [x, w]
    vjps = [vjp_x, vjp_w]
    if bt is not None:
        parents.append(bt)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _node(out, parents, vjps)


# ---- Normalization ----

def layer_norm(x, gain, bias, axis=1, eps=1e-5):
    """Normalize along one axis, then per-feature affine. gain/bias are 1-D."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    ax = axis % x.ndim
    n = x.shape[ax]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm affine shape {gain.shape}/{bias.shape} != ({n},)")
    bshape = [1] * x.ndim
    bshape[ax] = n
    g_b = gain.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_b + bias.data.reshape(bshape)

    def vjp_x(g):
        dxhat = g * g_b
        m1 = dxhat.mean(axis=ax, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    red = tuple(i for i in range(x.ndim) if i != ax)
    return _node(out, (x, gain, bias),
                 (vjp_x,
                  lambda g: (g * xhat).sum(axis=red),
                  lambda g: g.sum(axis=red)))


# ---- Shape and resampling ops ----

def pixel_shuffle(x, r):
    """(B, C*r^2, H, W) -> (B, C, H*r, W*r); pure index permutation."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ValueError(f"pixel_shuffle: channels {x.shape} not divisible by r^2={r * r}")
    b, crr, h, w = x.shape
    c = crr // (r * r)
    out = x.data.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)
    return _node(out, (x,), (lambda g: _unshuffle_data(g, r),))


def _unshuffle_data(y: Array, r: int) -> Array:
    b, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return y.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)


def pixel_unshuffle(x, r):
    """(B, C, H*r, W*r) -> (B, C*r^2, H, W); exact inverse of pixel_shuffle."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ValueError(f"pixel_unshuffle: spatial dims {x.shape} not divisible by r={r}")
    b, c, hr, wr = x.shape
    h, w = hr // r, wr // r

    def vjp(g):
        return g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, hr, wr)

    return _node(_unshuffle_data(x.data, r), (x,), (vjp,))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def make_vjp(k):
        sl = [slice(None)] * parts[k].ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, parts, [make_vjp(k) for k in range(len(parts))])


def bilinear_resize_rows(x, out_rows):
    """(C, H_in, W) -> (C, out_rows, W): linear interpolation at output row
    centers p_i = (i + 0.5) * (H_in - 1) / out_rows. For H_in = H+1 -> H this
    lands exactly on midpoints between adjacent input rows."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"bilinear_resize_rows expects (C,H,W), got {x.shape}")
    h_in = x.shape[1]
    p = (np.arange(out_rows) + 0.5) * (h_in - 1) / out_rows
    i0 = np.clip(np.floor(p).astype(int), 0, max(h_in - 2, 0))
    t = p - i0
    i1 = np.minimum(i0 + 1, h_in - 1)
    out = (1.0 - t)[None, :, None] * x.data[:, i0, :] + t[None, :, None] * x.data[:, i1, :]

    def vjp(g):
        dx = np.zeros_like(x.data)
        for i in range(out_rows):
            dx[:, i0[i], :] += (1.0 - t[i]) * g[:, i, :]
            dx[:, i1[i], :] += t[i] * g[:, i, :]
        return dx

    return _node(out, (x,), (vjp,))


def nearest_upsample(x, factor):
    """(B, C, H, W) -> (B, C, H*f, W*f) by repetition."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"nearest_upsample expects 4-D, got {x.shape}")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    b, c, h, w = x.shape
    return _node(out, (x,),
                 (lambda g: g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),))


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), (lambda g: g.transpose(inv),))


def scatter_mean(feats, cell_ids, n_cells):
    """(N, E) rows -> (n_cells, E); rows sharing a cell id are averaged,
    untouched cells stay zero."""
    feats = as_tensor(feats)
    ids = np.asarray(cell_ids, dtype=np.int64)
    counts = np.bincount(ids, minlength=n_cells).astype(np.float64)
    inv = np.zeros(n_cells)
    np.divide(1.0, counts, out=inv, where=counts > 0)
    out = np.zeros((n_cells, feats.shape[1]))
    np.add.at(out, ids, feats.data)
    out *= inv[:, None]
    return _node(out, (feats,), (lambda g: g[ids] * inv[ids][:, None],))


# ---- Backward pass ----

def backward(loss: Tensor, params=None):
    """Reverse-mode sweep from a scalar loss.

    Returns gradients keyed by name for `params` (a dict name -> Tensor);
    parameters the loss does not reach get zeros. Also populates .grad on
    every requires_grad tensor touched by the sweep.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.needs_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    computed = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
            computed[id(node)] = g
        for p, fn in zip(node._parents, node._vjps):
            if fn is None or not p.needs_grad:
                continue
            pg = fn(g)
            acc = grads.get(id(p))
            # never accumulate in place: vjps may return views of g
            grads[id(p)] = pg if acc is None else acc + pg

    if params is None:
        return {}
    out = {}
    for name, t in params.items():
        g = computed.get(id(t))
        out[name] = g if g is not None else np.zeros_like(t.data)
    return out
