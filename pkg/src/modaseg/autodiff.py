"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: each ``Tensor`` produced by an operation keeps its parents and a
closure computing the parent gradients from the upstream gradient. The heavy
array kernels (convolution, pooling, upsampling) are dispatched through
``backend.kernels()`` so they run either jitted or in pure numpy.

Gradients for a parent are only computed when that parent requires them,
which is what makes detached-discriminator updates cheap.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .backend import kernels
from .errors import ShapeError, ValidationError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape mismatch")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in node._backward(node.grad):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self:
                node.grad = None  # free intermediate grads eagerly

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, n):
        return pow_const(self, n)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    t = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bw)


def pow_const(a, n) -> Tensor:
    a = as_tensor(a)
    n = float(n)
    out = a.data ** n

    def bw(g):
        return ((a, g * n * a.data ** (n - 1.0)),)

    return _make(out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return ((a, g * out),)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(out, (a,), bw)


def sqrt(a) -> Tensor:
    """Elementwise square root with a zero subgradient at exactly zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(a.data > 0.0, a.data, 1.0)
        return ((a, np.where(a.data > 0.0, 0.5 * g / np.sqrt(safe), 0.0)),)

    return _make(out, (a,), bw)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        return ((a, g * np.sign(a.data)),)

    return _make(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return ((a, g * ((a.data > lo) & (a.data < hi))),)

    return _make(out, (a,), bw)


# -- nonlinearities --------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return ((a, g * (a.data > 0.0)),)

    return _make(out, (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data > 0.0, a.data, slope * a.data)

    def bw(g):
        return ((a, g * np.where(a.data > 0.0, 1.0, slope)),)

    return _make(out, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - out * out)),)

    return _make(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return ((a, g * out * (1.0 - out)),)

    return _make(out, (a,), bw)


# -- reductions and shape ops ------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape).copy()),)

    return _make(out, (a,), bw)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.data.shape)),)

    return _make(out, (a,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            pieces.append((t, np.ascontiguousarray(g[tuple(sl)])))
        return tuple(pieces)

    return _make(out, tuple(tensors), bw)


# -- padding (zero / reflect / replicate) -----------------------------------------

_PAD_MODES = {"zeros": "constant", "reflect": "reflect", "replicate": "edge"}


def _pad2d(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=_PAD_MODES[mode])


def _pad2d_backward(gxp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gxp
    if mode == "zeros":
        return np.ascontiguousarray(gxp[:, :, p:-p, p:-p])

    def collapse(g, axis):
        n = g.shape[axis] - 2 * p
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(p, p + n)
        core = np.ascontiguousarray(g[tuple(sl)])
        top = [slice(None)] * g.ndim
        top[axis] = slice(0, p)
        bot = [slice(None)] * g.ndim
        bot[axis] = slice(p + n, None)
        if mode == "replicate":
            edge0 = [slice(None)] * g.ndim
            edge0[axis] = 0
            core[tuple(edge0)] += g[tuple(top)].sum(axis=axis)
            edge1 = [slice(None)] * g.ndim
            edge1[axis] = n - 1
            core[tuple(edge1)] += g[tuple(bot)].sum(axis=axis)
        else:  # reflect: padded offset q folds onto interior index q
            tgt = [slice(None)] * g.ndim
            tgt[axis] = slice(1, p + 1)
            core[tuple(tgt)] += np.flip(g[tuple(top)], axis=axis)
            tgt[axis] = slice(n - p - 1, n - 1)
            core[tuple(tgt)] += np.flip(g[tuple(bot)], axis=axis)
        return core

    return collapse(collapse(gxp, 2), 3)


# -- structured ops backed by the kernel modules ------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2D cross-correlation of (N,Ci,H,W) with (Co,Ci,kh,kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if pad_mode not in _PAD_MODES:
        raise ValidationError(f"unknown pad mode {pad_mode!r}")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} / {w.data.shape}")
    K = kernels()
    xp = _pad2d(np.ascontiguousarray(x.data), padding, pad_mode)
    wd = np.ascontiguousarray(w.data)
    out = K.conv2d_forward(xp, wd, stride)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
    kh, kw = w.data.shape[2], w.data.shape[3]
    hp, wp = xp.shape[2], xp.shape[3]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _pad2d_backward(K.conv2d_grad_input(g, wd, stride, hp, wp), padding, pad_mode)
        if w.requires_grad:
            gw = K.conv2d_grad_weight(xp, g, stride, kh, kw)
        grads = [(x, gx), (w, gw)]
        if b is not None:
            if b.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(b.data.shape)
            grads.append((b, gb))
        return tuple(grads)

    return _make(out, parents, bw)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1,
                     output_padding: int = 1) -> Tensor:
    """Transposed conv (adjoint of conv2d). w layout: (Ci, Co, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"conv_transpose2d: channels {x.data.shape} / {w.data.shape}")
    if output_padding > padding:
        raise ValidationError("output_padding must not exceed padding")
    K = kernels()
    n, ci, h, wdt = x.data.shape
    _, co, kh, kw = w.data.shape
    hfull = (h - 1) * stride + kh
    wfull = (wdt - 1) * stride + kw
    hout = hfull - 2 * padding + output_padding
    wout = wfull - 2 * padding + output_padding
    wd = np.ascontiguousarray(w.data)
    full = K.conv2d_grad_input(np.ascontiguousarray(x.data), wd, stride, hfull, wfull)
    out = np.ascontiguousarray(full[:, :, padding:padding + hout, padding:padding + wout])
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gfull = np.zeros((n, co, hfull, wfull), dtype=np.float64)
        gfull[:, :, padding:padding + hout, padding:padding + wout] = g
        gx = gw = gb = None
        if x.requires_grad:
            gx = K.conv2d_forward(gfull, wd, stride)
        if w.requires_grad:
            gw = K.conv2d_grad_weight(gfull, np.ascontiguousarray(x.data), stride, kh, kw)
        grads = [(x, gx), (w, gw)]
        if b is not None:
            if b.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(b.data.shape)
            grads.append((b, gb))
        return tuple(grads)

    return _make(out, parents, bw)


def maxpool2x(x) -> Tensor:
    x = as_tensor(x)
    if x.data.shape[2] % 2 or x.data.shape[3] % 2:
        raise ShapeError(f"maxpool2x needs even spatial dims, got {x.data.shape}")
    K = kernels()
    out, idx = K.maxpool2x_forward(np.ascontiguousarray(x.data))

    def bw(g):
        return ((x, K.maxpool2x_backward(np.ascontiguousarray(g), idx)),)

    return _make(out, (x,), bw)


def upsample2x(x) -> Tensor:
    x = as_tensor(x)
    K = kernels()
    out = K.upsample2x_forward(np.ascontiguousarray(x.data))

    def bw(g):
        return ((x, K.upsample2x_backward(np.ascontiguousarray(g))),)

    return _make(out, (x,), bw)


def normalize_moments(x, axes: tuple, eps: float = 1e-5):
    """Normalize x to zero mean / unit variance over ``axes``.

    Returns (normalized Tensor, mean, variance); the moments are plain arrays
    (population variance) for running-statistics bookkeeping.
    """
    x = as_tensor(x)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return ((x, inv * (g - gm - y * gym)),)

    return _make(y, (x,), bw), mu, var


def softmax_channels(logits) -> Tensor:
    """Softmax over axis 1 of (N,C,H,W); shift-stabilized."""
    logits = as_tensor(logits)
    m = logits.data.max(axis=1, keepdims=True)
    z = exp(sub(logits, Tensor(m)))
    return div(z, sum_(z, axis=1, keepdims=True))
