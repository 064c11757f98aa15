"""Supervised segmentation: weighted-dice + cross-entropy loss, training
loop over mapped-source slices, and volume-level prediction.

The composite loss is beta * sum_c alpha_c * dice_c + (1 - beta) * BCE, with
the cross-entropy in its standard negative form (minimizing it moves
predictions toward the labels) and normalized per pixel. The per-class
weights alpha are used exactly as configured, never renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, ShapeError, ValidationError
from .nets import UNet2D, UNetConfig
from .nn import Adam
from .volume_io import AXIAL, LabelVolume, Volume, batch_images, batch_masks, slice_iterator


@dataclass(frozen=True)
class SegLossConfig:
    alpha: tuple = (0.1, 0.4, 0.5)
    beta: float = 0.65
    eps_smooth: float = 1e-6
    eps_log: float = 1e-7

    def __post_init__(self):
        if any(a < 0 for a in self.alpha):
            raise ConfigError("alpha weights must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        for eps in (self.eps_smooth, self.eps_log):
            if not 0 < eps <= 1e-3:
                raise ConfigError("loss eps terms must be in (0, 1e-3]")


@dataclass(frozen=True)
class SupervisedConfig:
    epochs: int = 60
    batch_size: int = 4
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    ckpt_interval: int = 0  # steps between periodic snapshots; 0 = none
    loss: SegLossConfig = field(default_factory=SegLossConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def dice_term(pred, onehot, eps_smooth: float) -> Tensor:
    """1 - (2 sum(pred*onehot) + eps) / (sum(pred) + sum(onehot) + eps)."""
    pred = ad.as_tensor(pred)
    onehot = ad.as_tensor(onehot)
    if pred.shape != onehot.shape:
        raise ShapeError(f"dice_term: {pred.shape} vs {onehot.shape}")
    inter = (pred * onehot).sum()
    denom = pred.sum() + onehot.sum() + eps_smooth
    return 1.0 - (2.0 * inter + eps_smooth) / denom


def one_hot(target: np.ndarray, num_classes: int) -> np.ndarray:
    """(N,H,W) int labels -> (N,C,H,W) float indicators."""
    target = np.asarray(target)
    if target.min() < 0 or target.max() >= num_classes:
        raise ValidationError(f"labels out of range [0, {num_classes})")
    out = np.zeros((target.shape[0], num_classes) + target.shape[1:], dtype=np.float64)
    for c in range(num_classes):
        out[:, c] = target == c
    return out


def seg_loss(pred, target: np.ndarray, cfg: SegLossConfig) -> Tensor:
    """Composite loss on per-pixel probabilities (N,C,H,W) vs labels (N,H,W)."""
    pred = ad.as_tensor(pred)
    if pred.ndim != 4:
        raise ShapeError(f"pred must be (N,C,H,W), got {pred.shape}")
    n, c, h, w = pred.shape
    if len(cfg.alpha) != c:
        raise ConfigError(f"{len(cfg.alpha)} alpha weights for {c} classes")
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} != {(n, h, w)}")
    oh = one_hot(target, c)

    total = Tensor(0.0)
    for cls in range(c):
        pc = _take_channel(pred, cls)
        total = total + cfg.beta * cfg.alpha[cls] * dice_term(pc, Tensor(oh[:, cls]),
                                                              cfg.eps_smooth)
    p = ad.clip(pred, cfg.eps_log, 1.0 - cfg.eps_log)
    oh_t = Tensor(oh)
    bce_sum = (oh_t * ad.log(p) + (1.0 - oh_t) * ad.log(1.0 - p)).sum()
    n_pix = float(n * h * w)
    total = total + (1.0 - cfg.beta) * (-1.0 / n_pix) * bce_sum
    return total


def _take_channel(t: Tensor, cls: int) -> Tensor:
    n, c, h, w = t.shape
    mask = np.zeros((1, c, 1, 1))
    mask[0, cls, 0, 0] = 1.0
    return (t * Tensor(mask)).sum(axis=1)


def build_unet(cfg: SupervisedConfig, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
    unet = UNet2D(cfg.unet, rng)
    opt = Adam(unet.named_parameters(), lr=cfg.lr, betas=cfg.betas)
    return unet, opt


def train_supervised(mapped_source, cfg: SupervisedConfig, seed: int,
                     snapshot_cb=None, log_every: int = 1,
                     unet: UNet2D | None = None, opt: Adam | None = None):
    """Train the U-Net on labeled (mapped-)source slices.

    mapped_source: list of (volume_id, Volume, LabelVolume); every sample
    must carry a mask. ``snapshot_cb(step, unet, opt)`` fires every
    ``ckpt_interval`` steps when configured. Returns (unet, opt, history, steps).
    """
    if not mapped_source:
        raise ValidationError("no training volumes")
    if any(lab is None for _, _, lab in mapped_source):
        raise ValidationError("supervised training requires a mask for every volume")
    if unet is None:
        unet, opt = build_unet(cfg, seed)
    entries = [(vid, vol, lab, "mapped_source") for vid, vol, lab in mapped_source]
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        ep_seed = int(np.random.SeedSequence((seed, 11, epoch)).generate_state(1)[0])
        for batch in slice_iterator(entries, batch_size=cfg.batch_size, shuffle_seed=ep_seed):
            x = Tensor(batch_images(batch))
            y = batch_masks(batch)
            opt.zero_grad()
            loss = seg_loss(unet(x), y, cfg.loss)
            loss.backward()
            opt.step()
            step += 1
            val = loss.item()
            if not np.isfinite(val):
                raise RuntimeError(f"non-finite segmentation loss at step {step}")
            if step % log_every == 0:
                history.append((step, "seg_loss", val))
            if cfg.ckpt_interval and snapshot_cb is not None and step % cfg.ckpt_interval == 0:
                snapshot_cb(step, unet, opt)
    return unet, opt, history, step


def predict_volume(unet: UNet2D, vol: Volume, axis: int = AXIAL, batch_slices: int = 8):
    """Slice-wise forward pass over a preprocessed volume.

    Returns (LabelVolume, probability stack (C, X, Y, Z)); per-pixel argmax
    with ties resolved toward the lower class index.
    """
    unet.eval()
    n_slices = vol.shape[axis]
    prob_planes = []
    for start in range(0, n_slices, batch_slices):
        idx = list(range(start, min(start + batch_slices, n_slices)))
        planes = [np.ascontiguousarray(np.take(vol.data, k, axis=axis)) for k in idx]
        x = Tensor(np.stack(planes)[:, None, :, :])
        with no_grad():
            p = unet(x)
        prob_planes.extend(p.data)
    unet.train()
    probs = np.stack(prob_planes, axis=-1)  # (C, H, W, S) along the slicing axis
    probs = np.moveaxis(probs, -1, axis + 1)  # back to volume axis order (C, X, Y, Z)
    labels = np.argmax(probs, axis=0).astype(np.int16)
    return LabelVolume(labels, vol.spacing, unet.cfg.num_classes), probs
