"""Output-space adversarial adaptation of the trained segmenter.

The segmenter plays generator against a fresh patch discriminator that sees,
per class: the predicted probability map (shape), the probability map times
the input image (texture), and the Sobel gradient magnitude of the
probability map (contour). Predictions on mapped-source slices are the
"real" class; predictions on target slices are "fake". Each iteration ends
with a supervised step on a labeled mapped-source batch so source-domain
performance is not forgotten.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, ShapeError
from .nets import DiscriminatorConfig, PatchDiscriminator
from .nn import Adam
from .segmentation import SegLossConfig, seg_loss
from .translation import gan_loss_discriminator, gan_loss_generator
from .volume_io import batch_images, batch_masks, slice_iterator

DISC_INPUT_MODES = ("full", "seg_only")

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 100
    batch_size: int = 4
    snapshot_interval: int = 50
    lr_gen: float = 1e-4
    lr_disc: float = 5e-5  # half the generator rate
    betas: tuple = (0.5, 0.999)
    eps_log: float = 1e-7
    adv_weight: float = 1.0
    supervised_step: bool = True
    disc_input: str = "full"
    disc_base_width: int = 32
    seg: SegLossConfig = field(default_factory=SegLossConfig)

    def __post_init__(self):
        if self.snapshot_interval < 1:
            raise ConfigError("snapshot_interval must be >= 1")
        if self.disc_input not in DISC_INPUT_MODES:
            raise ConfigError(f"disc_input must be one of {DISC_INPUT_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def sobel_magnitude(t: Tensor) -> Tensor:
    """Per-channel Sobel gradient magnitude of (N,C,H,W), replicate borders.

    Differentiable; the magnitude's subgradient at exactly-zero gradient
    pixels is zero.
    """
    n, c, h, w = t.shape
    flat = ad.reshape(t, (n * c, 1, h, w))
    kx = Tensor(_SOBEL_X[None, None])
    ky = Tensor(_SOBEL_X.T[None, None])
    gx = ad.conv2d(flat, kx, padding=1, pad_mode="replicate")
    gy = ad.conv2d(flat, ky, padding=1, pad_mode="replicate")
    mag = ad.sqrt(gx * gx + gy * gy)
    return ad.reshape(mag, (n, c, h, w))


def sobel_contour(m) -> np.ndarray:
    """Sobel gradient magnitude of a single 2D map (plain-array op)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"sobel_contour expects a 2D map, got {m.shape}")
    with no_grad():
        out = sobel_magnitude(Tensor(m[None, None]))
    return out.data[0, 0]


def sobel_components(m) -> tuple:
    """Raw (g_x, g_y) responses of a 2D map; both are linear in the input."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"sobel_components expects a 2D map, got {m.shape}")
    kx = Tensor(_SOBEL_X[None, None])
    ky = Tensor(_SOBEL_X.T[None, None])
    with no_grad():
        x = Tensor(m[None, None])
        gx = ad.conv2d(x, kx, padding=1, pad_mode="replicate")
        gy = ad.conv2d(x, ky, padding=1, pad_mode="replicate")
    return gx.data[0, 0], gy.data[0, 0]


def build_disc_input(probs, image, mode: str = "full") -> Tensor:
    """Stack shape/texture/contour channels for the discriminator.

    probs: (N,C,H,W) class probabilities; image: (N,1,H,W) the slice the
    prediction was made on. ``full`` yields 3C channels, ``seg_only`` just
    the C probability channels.
    """
    probs = ad.as_tensor(probs)
    image = ad.as_tensor(image)
    if probs.ndim != 4 or image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"bad shapes: probs {probs.shape}, image {image.shape}")
    if probs.shape[0] != image.shape[0] or probs.shape[2:] != image.shape[2:]:
        raise ShapeError(f"probs {probs.shape} and image {image.shape} do not align")
    if mode not in DISC_INPUT_MODES:
        raise ConfigError(f"unknown disc input mode {mode!r}")
    if mode == "seg_only":
        return probs
    texture = probs * image  # image broadcasts across class channels
    contour = sobel_magnitude(probs)
    return ad.concat([probs, texture, contour], axis=1)


def adv_feature_loss_discriminator(d_on_source_pred, d_on_target_pred, eps: float) -> Tensor:
    """Discriminator objective: mapped-source predictions real, target fake."""
    return gan_loss_discriminator(d_on_source_pred, d_on_target_pred, eps)


def adv_feature_loss_generator(d_on_target_pred, mode: str, eps: float) -> Tensor:
    """Segmenter's adversarial objective on target predictions."""
    return gan_loss_generator(d_on_target_pred, mode, eps)


def disc_channels(num_classes: int, mode: str) -> int:
    return num_classes if mode == "seg_only" else 3 * num_classes


def build_adapt_discriminator(cfg: AdaptConfig, num_classes: int, seed: int):
    dcfg = DiscriminatorConfig(in_channels=disc_channels(num_classes, cfg.disc_input),
                               base_width=cfg.disc_base_width)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 20)))
    disc = PatchDiscriminator(dcfg, rng)
    opt = Adam(disc.named_parameters(), lr=cfg.lr_disc, betas=cfg.betas)
    return disc, opt


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad = flag


def train_adaptation(unet, unet_opt, mapped_source, target, cfg: AdaptConfig, seed: int,
                     snapshot_cb=None, log_every: int = 1):
    """Adversarial phase over target slices with interleaved supervision.

    mapped_source: list of (volume_id, Volume, LabelVolume); target: list of
    (volume_id, Volume) — target labels are structurally absent from this
    path. Per iteration: (1) discriminator step, (2) segmenter adversarial
    step on a target batch, (3) supervised step on a mapped-source batch
    (when enabled). ``snapshot_cb(step, unet, unet_opt)`` fires every
    ``snapshot_interval`` steps and once more at the end.
    """
    disc, disc_opt = build_adapt_discriminator(cfg, unet.cfg.num_classes, seed)
    src_entries = [(vid, vol, lab, "mapped_source") for vid, vol, lab in mapped_source]
    tgt_entries = [(vid, vol, None, "target") for vid, vol in target]
    history = []
    step = 0
    last_snap = None
    for epoch in range(cfg.epochs):
        s_seed = int(np.random.SeedSequence((seed, 21, epoch)).generate_state(1)[0])
        t_seed = int(np.random.SeedSequence((seed, 22, epoch)).generate_state(1)[0])
        u_seed = int(np.random.SeedSequence((seed, 23, epoch)).generate_state(1)[0])
        src_it = slice_iterator(src_entries, batch_size=cfg.batch_size, shuffle_seed=s_seed)
        tgt_it = slice_iterator(tgt_entries, batch_size=cfg.batch_size, shuffle_seed=t_seed)
        sup_it = slice_iterator(src_entries, batch_size=cfg.batch_size, shuffle_seed=u_seed)
        for batch_s, batch_t, batch_u in zip(src_it, tgt_it, sup_it):
            x_s = Tensor(batch_images(batch_s))
            x_t = Tensor(batch_images(batch_t))

            # (1) discriminator on detached predictions
            with no_grad():
                in_s = build_disc_input(unet(x_s), x_s, cfg.disc_input)
                in_t = build_disc_input(unet(x_t), x_t, cfg.disc_input)
            disc_opt.zero_grad()
            d_loss = adv_feature_loss_discriminator(disc(in_s), disc(in_t), cfg.eps_log)
            d_loss.backward()
            disc_opt.step()

            # (2) segmenter tries to make target predictions look source-like
            _set_requires_grad(disc, False)
            unet_opt.zero_grad()
            probs_t = unet(x_t)
            g_adv = adv_feature_loss_generator(
                disc(build_disc_input(probs_t, x_t, cfg.disc_input)),
                "non_saturating", cfg.eps_log)
            (cfg.adv_weight * g_adv).backward()
            unet_opt.step()
            _set_requires_grad(disc, True)

            # (3) supervised anchor on labeled mapped-source slices
            sup_val = np.nan
            if cfg.supervised_step:
                x_u = Tensor(batch_images(batch_u))
                y_u = batch_masks(batch_u)
                unet_opt.zero_grad()
                sup = seg_loss(unet(x_u), y_u, cfg.seg)
                sup.backward()
                unet_opt.step()
                sup_val = sup.item()

            step += 1
            vals = {"d_adv": d_loss.item(), "g_adv": g_adv.item()}
            if cfg.supervised_step:
                vals["sup"] = sup_val
            for v in vals.values():
                if not np.isfinite(v):
                    raise RuntimeError(f"non-finite adaptation loss at step {step}: {vals}")
            if step % log_every == 0:
                for name, v in vals.items():
                    history.append((step, name, v))
            if snapshot_cb is not None and step % cfg.snapshot_interval == 0:
                snapshot_cb(step, unet, unet_opt)
                last_snap = step
    if snapshot_cb is not None and last_snap != step and step > 0:
        snapshot_cb(step, unet, unet_opt)
    return disc, history, step
