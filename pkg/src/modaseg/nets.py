"""Network families: translation generator, patch discriminator, 2D U-Net.

All three are plain ``nn.Module`` trees over the autodiff tape. Construction
consumes a seeded ``numpy`` Generator in a fixed attribute order, so
``init_params(cfg, seed)`` is bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, ShapeError
from .serialize import read_blob, write_blob


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_width: int = 16
    res_blocks: int = 6

    def __post_init__(self):
        if min(self.in_channels, self.base_width, self.res_blocks) < 1:
            raise ConfigError(f"generator config must be positive: {self}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_width: int = 32

    def __post_init__(self):
        if min(self.in_channels, self.base_width) < 1:
            raise ConfigError(f"discriminator config must be positive: {self}")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 32
    levels: int = 4
    residual: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.num_classes, self.base_width, self.levels) < 1:
            raise ConfigError(f"unet config must be positive: {self}")


class _ResBlock(nn.Module):
    def __init__(self, c: int, rng):
        super().__init__()
        self.c1 = nn.Conv2d(c, c, 3, rng, padding=1, pad_mode="reflect")
        self.n1 = nn.InstanceNorm2d(c)
        self.c2 = nn.Conv2d(c, c, 3, rng, padding=1, pad_mode="reflect")
        self.n2 = nn.InstanceNorm2d(c)

    def __call__(self, x):
        y = ad.relu(self.n1(self.c1(x)))
        return x + self.n2(self.c2(y))


class ResNetGenerator(nn.Module):
    """Image-to-image map: reflect-padded conv head, two stride-2 downs,
    residual trunk, two transposed-conv ups, tanh output in (-1, 1)."""

    def __init__(self, cfg: GeneratorConfig, rng):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        self.head = nn.Conv2d(cfg.in_channels, b, 7, rng, padding=3, pad_mode="reflect")
        self.hn = nn.InstanceNorm2d(b)
        self.d1 = nn.Conv2d(b, 2 * b, 3, rng, stride=2, padding=1)
        self.dn1 = nn.InstanceNorm2d(2 * b)
        self.d2 = nn.Conv2d(2 * b, 4 * b, 3, rng, stride=2, padding=1)
        self.dn2 = nn.InstanceNorm2d(4 * b)
        self.blocks = [_ResBlock(4 * b, rng) for _ in range(cfg.res_blocks)]
        self.u1 = nn.ConvTranspose2d(4 * b, 2 * b, rng)
        self.un1 = nn.InstanceNorm2d(2 * b)
        self.u2 = nn.ConvTranspose2d(2 * b, b, rng)
        self.un2 = nn.InstanceNorm2d(b)
        self.tail = nn.Conv2d(b, cfg.in_channels, 7, rng, padding=3, pad_mode="reflect")

    def __call__(self, x):
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"generator expects {self.cfg.in_channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"generator needs H,W divisible by 4, got {h}x{w}")
        y = ad.relu(self.hn(self.head(x)))
        y = ad.relu(self.dn1(self.d1(y)))
        y = ad.relu(self.dn2(self.d2(y)))
        for blk in self.blocks:
            y = blk(y)
        y = ad.relu(self.un1(self.u1(y)))
        y = ad.relu(self.un2(self.u2(y)))
        return ad.tanh(self.tail(y))


class PatchDiscriminator(nn.Module):
    """Patch-level real-probability grid; three stride-2 stages (factor 8)."""

    downsample_factor = 8

    def __init__(self, cfg: DiscriminatorConfig, rng):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        self.c1 = nn.Conv2d(cfg.in_channels, b, 4, rng, stride=2, padding=1)
        self.c2 = nn.Conv2d(b, 2 * b, 4, rng, stride=2, padding=1)
        self.n2 = nn.InstanceNorm2d(2 * b)
        self.c3 = nn.Conv2d(2 * b, 4 * b, 4, rng, stride=2, padding=1)
        self.n3 = nn.InstanceNorm2d(4 * b)
        self.c4 = nn.Conv2d(4 * b, 4 * b, 3, rng, padding=1)
        self.n4 = nn.InstanceNorm2d(4 * b)
        self.out = nn.Conv2d(4 * b, 1, 3, rng, padding=1)

    def __call__(self, x):
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"discriminator expects {self.cfg.in_channels} channels, got {c}")
        f = self.downsample_factor
        if h % f or w % f:
            raise ShapeError(f"discriminator needs H,W divisible by {f}, got {h}x{w}")
        y = ad.leaky_relu(self.c1(x))
        y = ad.leaky_relu(self.n2(self.c2(y)))
        y = ad.leaky_relu(self.n3(self.c3(y)))
        y = ad.leaky_relu(self.n4(self.c4(y)))
        return ad.sigmoid(self.out(y))


class _ConvBlock(nn.Module):
    def __init__(self, ci: int, co: int, rng, residual: bool):
        super().__init__()
        self.c1 = nn.Conv2d(ci, co, 3, rng, padding=1, init="he")
        self.n1 = nn.BatchNorm2d(co)
        self.c2 = nn.Conv2d(co, co, 3, rng, padding=1, init="he")
        self.n2 = nn.BatchNorm2d(co)
        self.residual = residual
        self.proj = None
        if residual and ci != co:
            self.proj = nn.Conv2d(ci, co, 1, rng, init="he", bias=False)

    def __call__(self, x):
        y = ad.relu(self.n1(self.c1(x)))
        y = self.n2(self.c2(y))
        if self.residual:
            y = y + (self.proj(x) if self.proj is not None else x)
        return ad.relu(y)


class UNet2D(nn.Module):
    """Encoder/decoder with skip connections; per-pixel class probabilities."""

    def __init__(self, cfg: UNetConfig, rng):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.levels)]
        self.enc = []
        ci = cfg.in_channels
        for wdt in widths[:-1]:
            self.enc.append(_ConvBlock(ci, wdt, rng, cfg.residual))
            ci = wdt
        self.bottom = _ConvBlock(ci, widths[-1], rng, cfg.residual)
        self.dec = []
        ci = widths[-1]
        for wdt in reversed(widths[:-1]):
            self.dec.append(_ConvBlock(ci + wdt, wdt, rng, cfg.residual))
            ci = wdt
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1, rng, init="he")

    def forward_logits(self, x):
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"unet expects {self.cfg.in_channels} channels, got {c}")
        div = 2 ** (self.cfg.levels - 1)
        if h % div or w % div:
            raise ShapeError(f"unet needs H,W divisible by {div}, got {h}x{w}")
        skips = []
        y = x
        for blk in self.enc:
            y = blk(y)
            skips.append(y)
            y = ad.maxpool2x(y)
        y = self.bottom(y)
        for blk, skip in zip(self.dec, reversed(skips)):
            y = ad.upsample2x(y)
            y = blk(ad.concat([y, skip], axis=1))
        return self.head(y)

    def __call__(self, x):
        return ad.softmax_channels(self.forward_logits(x))


def init_params(cfg, seed: int):
    """Build the network for ``cfg`` with weights drawn deterministically."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if isinstance(cfg, GeneratorConfig):
        return ResNetGenerator(cfg, rng)
    if isinstance(cfg, DiscriminatorConfig):
        return PatchDiscriminator(cfg, rng)
    if isinstance(cfg, UNetConfig):
        return UNet2D(cfg, rng)
    raise ConfigError(f"unknown architecture config: {type(cfg).__name__}")


# -- checkpoints ---------------------------------------------------------------

PHASES = ("translation", "supervised", "adaptation")


def save_checkpoint(path, *, phase: str, step: int, seed: int, config_hash: str,
                    models: dict, optimizers: dict | None = None, extra: dict | None = None):
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    arrays = {}
    for mname, model in models.items():
        for pname, arr in model.state_dict().items():
            arrays[f"model/{mname}/{pname}"] = arr
    opt_meta = {}
    for oname, opt in (optimizers or {}).items():
        sd = opt.state_dict()
        opt_meta[oname] = {"t": sd["t"], "lr": sd["lr"]}
        for pname, arr in sd["m"].items():
            arrays[f"optim/{oname}/m/{pname}"] = arr
        for pname, arr in sd["v"].items():
            arrays[f"optim/{oname}/v/{pname}"] = arr
    meta = {
        "phase": phase,
        "step": int(step),
        "seed": int(seed),
        "config_hash": config_hash,
        "optimizers": opt_meta,
        "extra": extra or {},
    }
    write_blob(path, meta, arrays)


def load_checkpoint(path, expected_hash: str | None = None, allow_mismatch: bool = False):
    """Read a checkpoint; refuses a config-hash mismatch unless overridden."""
    meta, arrays = read_blob(path)
    if expected_hash is not None and meta["config_hash"] != expected_hash and not allow_mismatch:
        raise ConfigError(
            f"{path}: config hash {meta['config_hash']} != expected {expected_hash} "
            f"(pass allow_mismatch/--allow-hash-mismatch to override)")
    return meta, arrays


def restore_model(model: nn.Module, arrays: dict, name: str):
    prefix = f"model/{name}/"
    sd = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    model.load_state_dict(sd)
    return model


def restore_optimizer(opt: nn.Adam, meta: dict, arrays: dict, name: str):
    m_prefix, v_prefix = f"optim/{name}/m/", f"optim/{name}/v/"
    sd = {
        "t": meta["optimizers"][name]["t"],
        "lr": meta["optimizers"][name]["lr"],
        "m": {k[len(m_prefix):]: v for k, v in arrays.items() if k.startswith(m_prefix)},
        "v": {k[len(v_prefix):]: v for k, v in arrays.items() if k.startswith(v_prefix)},
    }
    opt.load_state_dict(sd)
    return opt
