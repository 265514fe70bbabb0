"""Dense tensors with define-by-run reverse-mode differentiation.

Arrays are plain numpy buffers; every differentiable operation records a
closure that maps the output gradient to the input gradients.  The canonical
layout is ``(member, channel, lat, lon)``; any number of leading batch axes
is allowed in front of it.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Param", "DimensionError", "no_grad", "as_tensor",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "sqrt", "relu",
    "softplus", "sum", "mean", "member_std", "concat_channels", "reshape", "take",
    "einsum", "channel_project", "conv2d_5x5", "layer_norm", "softmax",
    "gaussian_crps",
]

DEBUG = bool(os.environ.get("ENSPOST_DEBUG"))
_GRAD_ENABLED = True
_KINK_PROBE = None


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def kink_probe():
    """Collect the smallest |input| of every relu evaluated inside the block.

    Finite differences are only a valid gradient oracle away from the relu
    kink, so gradient checks use this to discard degenerate draws.
    """
    global _KINK_PROBE
    prev = _KINK_PROBE
    _KINK_PROBE = []
    try:
        yield _KINK_PROBE
    finally:
        _KINK_PROBE = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every tracked ``t``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)


class Param(Tensor):
    """Trainable leaf tensor with a checkpoint name and a fixed shape."""

    def __init__(self, name, data):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self._shape = self.data.shape

    def assign(self, values):
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self._shape:
            raise DimensionError(f"{self.name}: cannot assign shape {values.shape} to {self._shape}")
        self.data = values.copy()

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data, parents, backward):
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return scale(a, -1.0)


def scale(a, s):
    a = as_tensor(a)
    return _make(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


def relu(a):
    a = as_tensor(a)
    if _KINK_PROBE is not None and a.data.size:
        _KINK_PROBE.append(float(np.abs(a.data).min()))
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(a.dtype)
    sig = np.exp(-np.logaddexp(0, -x)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * sig,))


# -- reductions and shape --------------------------------------------------

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


def member_std(a, axis=-4, ddof=1, floor=0.0, keepdims=True):
    """Standard deviation along the member axis, floored as sqrt(var + floor^2)."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n - ddof <= 0:
        raise DimensionError(f"member_std needs more than {ddof} members, got {n}")
    dev = a.data - a.data.mean(axis=axis, keepdims=True)
    var = (dev ** 2).sum(axis=axis, keepdims=True) / (n - ddof)
    out = np.sqrt(var + floor ** 2)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * dev / ((n - ddof) * out),)
    return _make(out if keepdims else np.squeeze(out, axis), (a,), back)


def concat_channels(tensors, axis=-3):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tuple(tensors), back)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a, index, axis):
    """Select a single index along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)
    return _make(out, (a,), back)


def einsum(subscripts, a, b):
    """Two-operand einsum; every index of an operand must appear in the other or the output."""
    a, b = _pair(a, b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_s},{sb}->{sa}", g, b.data, optimize=True)
            ga = _unbroadcast(ga, a.shape) if ga.shape != a.shape else ga
        if b.requires_grad:
            gb = np.einsum(f"{out_s},{sa}->{sb}", g, a.data, optimize=True)
            gb = _unbroadcast(gb, b.shape) if gb.shape != b.shape else gb
        return ga, gb
    return _make(out, (a, b), back)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (w * (g - (g * w).sum(axis=axis, keepdims=True)),)
    return _make(w, (a,), back)


# -- network primitives ----------------------------------------------------

def channel_project(x, W):
    """1x1 projection: out[..., m, y, x] = sum_c x[..., c, y, x] * W[c, m]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim < 3 or W.ndim != 2 or x.shape[-3] != W.shape[0]:
        raise DimensionError(f"channel_project: input {x.shape} incompatible with weight {W.shape}")
    return einsum("...chw,cm->...mhw", x, W)


def _pad_periodic_lon(x, p):
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(p, p), (0, 0)], mode="constant")
    return np.pad(xp, pad + [(0, 0), (p, p)], mode="wrap")


def conv2d_5x5(x, kernel, bias):
    """5x5 convolution; longitude wraps around, latitude is zero padded.

    All axes in front of ``(channel, lat, lon)`` are treated as batch.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[2:] != (5, 5):
        raise ValueError(f"conv2d_5x5 needs a (c_out, c_in, 5, 5) kernel, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-3] != kernel.shape[1]:
        raise DimensionError(f"conv2d_5x5: input {x.shape} incompatible with kernel {kernel.shape}")
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    c_out = kernel.shape[0]
    # channel-last im2col with column order (a, b, c)
    xp = _pad_periodic_lon(x.data.reshape(-1, c, h, w), 2).transpose(0, 2, 3, 1)
    win = np.lib.stride_tricks.sliding_window_view(xp, (5, 5), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, 25 * c)
    k2 = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(c_out, 25 * c)
    out = cols @ k2.T + bias.data
    out = out.reshape(-1, h, w, c_out).transpose(0, 3, 1, 2).reshape(lead + (c_out, h, w))

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, c_out, h, w).transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gx = gk = gb = None
        if x.requires_grad:
            gcol = (g2 @ k2).reshape(-1, h, w, 5, 5, c)
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(5):
                for b in range(5):
                    gp[:, a:a + h, b:b + w] += gcol[:, :, :, a, b]
            gp = gp[:, 2:h + 2]
            gx = gp[:, :, 2:w + 2].copy()
            for col in (0, 1, w + 2, w + 3):
                gx[:, :, (col - 2) % w] += gp[:, :, col]
            gx = gx.transpose(0, 3, 1, 2).reshape(x.shape)
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(c_out, 5, 5, c).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb
    return _make(np.ascontiguousarray(out, dtype=x.dtype), (x, kernel, bias), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each member over (channel, lat, lon), then per-channel affine."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    axes = (-3, -2, -1)
    n = int(np.prod(x.shape[-3:]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)
    normed = _make(xhat.astype(x.dtype, copy=False), (x,), back)
    c = x.shape[-3]
    return add(mul(normed, reshape(gain, (c, 1, 1))), reshape(bias, (c, 1, 1)))


_SQRT_PI = np.sqrt(np.pi)


def gaussian_crps(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) against y, elementwise."""
    mu, sigma, y = as_tensor(mu), as_tensor(sigma), as_tensor(y)
    if np.any(sigma.data <= 0):
        raise ValueError("gaussian_crps requires sigma > 0")
    z = (y.data - mu.data) / sigma.data
    cdf = 0.5 * (1 + erf(z / np.sqrt(2)))
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    out = sigma.data * (z * (2 * cdf - 1) + 2 * pdf - 1 / _SQRT_PI)
    dtype = np.result_type(mu.dtype, sigma.dtype)
    dz = (2 * cdf - 1).astype(dtype)  # dCRPS/dy
    ds = (2 * pdf - 1 / _SQRT_PI).astype(dtype)

    def back(g):
        return (_unbroadcast(-g * dz, mu.shape), _unbroadcast(g * ds, sigma.shape),
                _unbroadcast(g * dz, y.shape))
    return _make(out.astype(dtype, copy=False), (mu, sigma, y), back)
