"""Unpaired image-level adaptation: two generators, two discriminators,
adversarial losses with a cycle-consistency term.

Loss conventions: discriminators output probabilities; every log argument is
clamped to [eps, 1-eps]. The discriminator objective is the negated two-term
cross-entropy (so it is minimized); the generator side is selectable between
the saturating form and the standard non-saturating surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, ShapeError, ValidationError
from .nets import DiscriminatorConfig, GeneratorConfig, PatchDiscriminator, ResNetGenerator
from .nn import Adam
from .volume_io import Volume, batch_images, slice_iterator

GEN_LOSS_MODES = ("saturating", "non_saturating")


@dataclass(frozen=True)
class TranslationConfig:
    lambda_cycle: float = 10.0
    gen_loss_mode: str = "non_saturating"
    epochs: int = 40
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    eps_log: float = 1e-7
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.lambda_cycle < 0:
            raise ConfigError("lambda_cycle must be >= 0")
        if not 0 < self.eps_log <= 1e-3:
            raise ConfigError("eps_log must be in (0, 1e-3]")
        if self.gen_loss_mode not in GEN_LOSS_MODES:
            raise ConfigError(f"gen_loss_mode must be one of {GEN_LOSS_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def _check_probs(t):
    d = t.data if isinstance(t, Tensor) else np.asarray(t)
    if ((d <= 0.0) | (d >= 1.0)).any():
        raise ValidationError("discriminator outputs must lie strictly in (0, 1)")


def gan_loss_discriminator(d_real, d_fake, eps: float) -> Tensor:
    """-mean log(d_real) - mean log(1 - d_fake); 2 ln 2 at the 0.5 point."""
    d_real, d_fake = ad.as_tensor(d_real), ad.as_tensor(d_fake)
    _check_probs(d_real)
    _check_probs(d_fake)
    real_term = ad.log(ad.clip(d_real, eps, 1.0 - eps)).mean()
    fake_term = ad.log(ad.clip(1.0 - d_fake, eps, 1.0 - eps)).mean()
    return -real_term - fake_term


def gan_loss_generator(d_fake, mode: str, eps: float) -> Tensor:
    """Generator-side adversarial loss on the discriminator's fake scores."""
    if mode not in GEN_LOSS_MODES:
        raise ValidationError(f"unknown generator loss mode {mode!r}")
    d_fake = ad.as_tensor(d_fake)
    _check_probs(d_fake)
    if mode == "non_saturating":
        return -ad.log(ad.clip(d_fake, eps, 1.0 - eps)).mean()
    return ad.log(ad.clip(1.0 - d_fake, eps, 1.0 - eps)).mean()


def cycle_loss(x_src, rec_src, x_tgt, rec_tgt) -> Tensor:
    """Mean absolute reconstruction error, both directions."""
    x_src, rec_src = ad.as_tensor(x_src), ad.as_tensor(rec_src)
    x_tgt, rec_tgt = ad.as_tensor(x_tgt), ad.as_tensor(rec_tgt)
    if x_src.shape != rec_src.shape or x_tgt.shape != rec_tgt.shape:
        raise ShapeError("cycle_loss: reconstruction shape mismatch")
    return ad.abs_(rec_src - x_src).mean() + ad.abs_(rec_tgt - x_tgt).mean()


def translation_objective(x_src, x_tgt, g_s2t, g_t2s, d_tgt, d_src,
                          cfg: TranslationConfig) -> dict:
    """Per-player losses for one batch.

    Returns Tensors: discriminator losses are computed on detached fakes;
    ``g_total`` = both adversarial terms + lambda * cycle.
    """
    x_src, x_tgt = ad.as_tensor(x_src), ad.as_tensor(x_tgt)
    fake_tgt = g_s2t(x_src)
    fake_src = g_t2s(x_tgt)
    rec_src = g_t2s(fake_tgt)
    rec_tgt = g_s2t(fake_src)

    d_tgt_loss = gan_loss_discriminator(d_tgt(x_tgt), d_tgt(fake_tgt.detach()), cfg.eps_log)
    d_src_loss = gan_loss_discriminator(d_src(x_src), d_src(fake_src.detach()), cfg.eps_log)

    g_adv = gan_loss_generator(d_tgt(fake_tgt), cfg.gen_loss_mode, cfg.eps_log) \
        + gan_loss_generator(d_src(fake_src), cfg.gen_loss_mode, cfg.eps_log)
    cyc = cycle_loss(x_src, rec_src, x_tgt, rec_tgt)
    g_total = g_adv + cfg.lambda_cycle * cyc
    return {"d_tgt": d_tgt_loss, "d_src": d_src_loss, "g_adv": g_adv,
            "cycle": cyc, "g_total": g_total}


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad = flag


def build_translation_nets(cfg: TranslationConfig, seed: int):
    """Deterministic construction of the four players and their optimizers."""
    ss = np.random.SeedSequence((seed, 1))
    seeds = ss.generate_state(4)
    g_s2t = ResNetGenerator(cfg.generator, np.random.default_rng(seeds[0]))
    g_t2s = ResNetGenerator(cfg.generator, np.random.default_rng(seeds[1]))
    d_tgt = PatchDiscriminator(cfg.discriminator, np.random.default_rng(seeds[2]))
    d_src = PatchDiscriminator(cfg.discriminator, np.random.default_rng(seeds[3]))
    gen_params = [(f"s2t.{n}", p) for n, p in g_s2t.named_parameters()] \
        + [(f"t2s.{n}", p) for n, p in g_t2s.named_parameters()]
    opt_g = Adam(gen_params, lr=cfg.lr, betas=cfg.betas)
    opt_dt = Adam(d_tgt.named_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_ds = Adam(d_src.named_parameters(), lr=cfg.lr, betas=cfg.betas)
    nets = {"g_s2t": g_s2t, "g_t2s": g_t2s, "d_tgt": d_tgt, "d_src": d_src}
    optims = {"gen": opt_g, "d_tgt": opt_dt, "d_src": opt_ds}
    return nets, optims


def train_translation(source, target, cfg: TranslationConfig, seed: int,
                      log_every: int = 1):
    """Train the translation stage.

    source: list of (volume_id, Volume, LabelVolume-or-None);
    target: list of (volume_id, Volume). Per batch the update order is fixed:
    target-side discriminator, source-side discriminator, then both
    generators jointly. Returns (nets, optims, history, steps).
    """
    if not source or not target:
        raise ValidationError("both domains need at least one volume")
    nets, optims = build_translation_nets(cfg, seed)
    g_s2t, g_t2s = nets["g_s2t"], nets["g_t2s"]
    d_tgt, d_src = nets["d_tgt"], nets["d_src"]
    src_entries = [(vid, vol, None, "source") for vid, vol, _ in source]
    tgt_entries = [(vid, vol, None, "target") for vid, vol in target]
    history = []
    step = 0
    lr0 = cfg.lr
    decay_start = cfg.epochs // 2
    for epoch in range(cfg.epochs):
        if cfg.epochs > 1 and epoch >= decay_start:
            frac = (cfg.epochs - epoch) / max(1, cfg.epochs - decay_start)
            for opt in optims.values():
                opt.lr = lr0 * frac
        s_seed = int(np.random.SeedSequence((seed, 2, epoch)).generate_state(1)[0])
        t_seed = int(np.random.SeedSequence((seed, 3, epoch)).generate_state(1)[0])
        src_it = slice_iterator(src_entries, batch_size=cfg.batch_size, shuffle_seed=s_seed)
        tgt_it = slice_iterator(tgt_entries, batch_size=cfg.batch_size, shuffle_seed=t_seed)
        for batch_s, batch_t in zip(src_it, tgt_it):
            x_src = Tensor(batch_images(batch_s))
            x_tgt = Tensor(batch_images(batch_t))

            with no_grad():
                fake_tgt = g_s2t(x_src)
                fake_src = g_t2s(x_tgt)

            optims["d_tgt"].zero_grad()
            loss_dt = gan_loss_discriminator(d_tgt(x_tgt), d_tgt(fake_tgt), cfg.eps_log)
            loss_dt.backward()
            optims["d_tgt"].step()

            optims["d_src"].zero_grad()
            loss_ds = gan_loss_discriminator(d_src(x_src), d_src(fake_src), cfg.eps_log)
            loss_ds.backward()
            optims["d_src"].step()

            _set_requires_grad(d_tgt, False)
            _set_requires_grad(d_src, False)
            optims["gen"].zero_grad()
            fake_tgt = g_s2t(x_src)
            fake_src = g_t2s(x_tgt)
            g_adv = gan_loss_generator(d_tgt(fake_tgt), cfg.gen_loss_mode, cfg.eps_log) \
                + gan_loss_generator(d_src(fake_src), cfg.gen_loss_mode, cfg.eps_log)
            cyc = cycle_loss(x_src, g_t2s(fake_tgt), x_tgt, g_s2t(fake_src))
            g_total = g_adv + cfg.lambda_cycle * cyc
            g_total.backward()
            optims["gen"].step()
            _set_requires_grad(d_tgt, True)
            _set_requires_grad(d_src, True)

            step += 1
            vals = {"d_tgt": loss_dt.item(), "d_src": loss_ds.item(),
                    "g_adv": g_adv.item(), "cycle": cyc.item(), "g_total": g_total.item()}
            for v in vals.values():
                if not np.isfinite(v):
                    raise RuntimeError(f"non-finite translation loss at step {step}: {vals}")
            if step % log_every == 0:
                for name, v in vals.items():
                    history.append((step, name, v))
    return nets, optims, history, step


def translate_dataset(g_s2t, source, batch_slices: int = 8):
    """Map every source volume through the trained generator, slice-wise.

    Masks are carried over unchanged; the result is tagged mapped_source.
    Returns list of (volume_id, Volume, LabelVolume-or-None).
    """
    out = []
    for vid, vol, lab in source:
        nz = vol.shape[2]
        planes = []
        for start in range(0, nz, batch_slices):
            sl = [np.ascontiguousarray(vol.data[:, :, k])
                  for k in range(start, min(start + batch_slices, nz))]
            x = Tensor(np.stack(sl)[:, None, :, :])
            with no_grad():
                y = g_s2t(x)
            planes.extend(y.data[:, 0, :, :])
        mapped = np.stack(planes, axis=2)
        out.append((vid, Volume(mapped, vol.spacing), lab))
    return out
