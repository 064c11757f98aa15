"""Minimal layer/optimizer toolkit on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class Module:
    """Base class: parameter/buffer discovery by attribute walk.

    Attribute insertion order defines the (stable) parameter order.
    Subclasses list buffer attribute names in ``_buffers``.
    """

    _buffers: tuple = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in type(self)._buffers:
            yield prefix + name, getattr(self, name)
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def train(self, mode: bool = True):
        self.training = mode
        for _, val in vars(self).items():
            if isinstance(val, Module):
                val.train(mode)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict:
        sd = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            sd[name] = buf.copy()
        return sd

    def load_state_dict(self, sd: dict):
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        missing = (set(own_params) | set(own_bufs)) - set(sd)
        extra = set(sd) - (set(own_params) | set(own_bufs))
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own_params.items():
            if p.data.shape != sd[name].shape:
                raise ShapeError(f"param {name}: {p.data.shape} vs {sd[name].shape}")
            p.data = np.asarray(sd[name], dtype=np.float64).copy()
        for name, buf in own_bufs.items():
            np.copyto(buf, sd[name])


class Conv2d(Module):
    def __init__(self, ci: int, co: int, k: int, rng, stride: int = 1, padding: int = 0,
                 pad_mode: str = "zeros", bias: bool = True, init: str = "gan"):
        super().__init__()
        if ci < 1 or co < 1 or k < 1:
            raise ConfigError(f"Conv2d dims must be positive: ci={ci} co={co} k={k}")
        std = 0.02 if init == "gan" else float(np.sqrt(2.0 / (ci * k * k)))
        self.w = Tensor(rng.normal(0.0, std, (co, ci, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(co), requires_grad=True) if bias else None
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding, self.pad_mode)


class ConvTranspose2d(Module):
    def __init__(self, ci: int, co: int, rng, k: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: int = 1, bias: bool = True, init: str = "gan"):
        super().__init__()
        if ci < 1 or co < 1 or k < 1:
            raise ConfigError(f"ConvTranspose2d dims must be positive: ci={ci} co={co} k={k}")
        std = 0.02 if init == "gan" else float(np.sqrt(2.0 / (ci * k * k)))
        self.w = Tensor(rng.normal(0.0, std, (ci, co, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(co), requires_grad=True) if bias else None
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.w, self.b, self.stride, self.padding,
                                   self.output_padding)


class InstanceNorm2d(Module):
    """Per-sample, per-channel spatial normalization with affine transform."""

    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones((c, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((c, 1, 1)), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        y, _, _ = ad.normalize_moments(x, (2, 3), self.eps)
        return y * self.gamma + self.beta


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones((c, 1, 1)), requires_grad=True)
        self.beta = Tensor(np.zeros((c, 1, 1)), requires_grad=True)
        self.running_mean = np.zeros((1, c, 1, 1))
        self.running_var = np.ones((1, c, 1, 1))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x):
        if self.training:
            y, mu, var = ad.normalize_moments(x, (0, 2, 3), self.eps)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mu
            self.running_var *= 1.0 - m
            self.running_var += m * var
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            y = (x - Tensor(self.running_mean)) * Tensor(inv)
        return y * self.gamma + self.beta


class Adam:
    """Adam with bias correction; state round-trips through state_dict."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.items = list(named_params)
        names = [n for n, _ in self.items]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in optimizer")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.items}
        self.v = {n: np.zeros_like(p.data) for n, p in self.items}

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.items:
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "lr": self.lr,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, sd: dict):
        if set(sd["m"]) != set(self.m):
            raise ConfigError("optimizer state names do not match")
        self.t = int(sd["t"])
        self.lr = float(sd["lr"])
        for n in self.m:
            np.copyto(self.m[n], sd["m"][n])
            np.copyto(self.v[n], sd["v"][n])
