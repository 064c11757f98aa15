"""Translation losses against scalar oracles; training-loop contracts."""

import math

import numpy as np
import pytest

from modaseg import autodiff as ad
from modaseg.autodiff import Tensor, no_grad
from modaseg.errors import ShapeError, ValidationError
from modaseg.nets import DiscriminatorConfig, GeneratorConfig
from modaseg.translation import (TranslationConfig, build_translation_nets, cycle_loss,
                                 gan_loss_discriminator, gan_loss_generator,
                                 train_translation, translate_dataset, translation_objective)
from modaseg.volume_io import LabelVolume, Volume
from oracles import scalar_disc_loss, scalar_gen_loss

EPS = 1e-7

TINY = TranslationConfig(
    epochs=1, batch_size=4,
    generator=GeneratorConfig(base_width=2, res_blocks=1),
    discriminator=DiscriminatorConfig(base_width=2))


def grid(v):
    return np.full((1, 1, 2, 2), v)


def test_disc_loss_uninformative_point():
    loss = gan_loss_discriminator(Tensor(grid(0.5)), Tensor(grid(0.5)), EPS)
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_disc_loss_optimum_near_zero():
    loss = gan_loss_discriminator(Tensor(grid(1 - EPS)), Tensor(grid(EPS)), EPS)
    assert loss.item() == pytest.approx(-2 * math.log(1 - EPS), abs=1e-12)
    assert 0 <= loss.item() < 1e-6


def test_disc_loss_matches_scalar_oracle():
    d_real = np.array([0.9, 0.8]).reshape(1, 1, 1, 2)
    d_fake = np.array([0.3, 0.1]).reshape(1, 1, 1, 2)
    want = -(math.log(0.9) + math.log(0.8)) / 2 - (math.log(0.7) + math.log(0.9)) / 2
    got = gan_loss_discriminator(Tensor(d_real), Tensor(d_fake), EPS).item()
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(scalar_disc_loss(d_real, d_fake, EPS), abs=1e-12)


def test_disc_loss_rejects_out_of_range():
    with pytest.raises(ValidationError):
        gan_loss_discriminator(Tensor(grid(1.0)), Tensor(grid(0.5)), EPS)
    with pytest.raises(ValidationError):
        gan_loss_discriminator(Tensor(grid(0.5)), Tensor(grid(0.0)), EPS)


def test_gen_loss_values_and_oracle():
    assert gan_loss_generator(Tensor(grid(0.5)), "non_saturating", EPS).item() \
        == pytest.approx(math.log(2), abs=1e-9)
    assert gan_loss_generator(Tensor(grid(0.5)), "saturating", EPS).item() \
        == pytest.approx(-math.log(2), abs=1e-9)
    d = np.array([0.2, 0.6, 0.9]).reshape(1, 1, 1, 3)
    got = gan_loss_generator(Tensor(d), "non_saturating", EPS).item()
    assert got == pytest.approx(-(math.log(0.2) + math.log(0.6) + math.log(0.9)) / 3,
                                abs=1e-12)
    assert got == pytest.approx(scalar_gen_loss(d, "non_saturating", EPS), abs=1e-12)


def test_gen_loss_monotone_in_scores():
    lo = gan_loss_generator(Tensor(grid(0.3)), "non_saturating", EPS).item()
    hi = gan_loss_generator(Tensor(grid(0.7)), "non_saturating", EPS).item()
    assert hi < lo


def test_cycle_loss():
    rng = np.random.default_rng(0)
    x_s = rng.normal(size=(2, 1, 2, 2))
    x_t = rng.normal(size=(2, 1, 2, 2))
    assert cycle_loss(Tensor(x_s), Tensor(x_s), Tensor(x_t), Tensor(x_t)).item() == 0.0
    off = cycle_loss(Tensor(x_s), Tensor(x_s + 0.3), Tensor(x_t), Tensor(x_t)).item()
    assert off == pytest.approx(0.3, abs=1e-12)
    rec_s, rec_t = rng.normal(size=(2, 1, 2, 2)), rng.normal(size=(2, 1, 2, 2))
    want = np.abs(rec_s - x_s).mean() + np.abs(rec_t - x_t).mean()
    got = cycle_loss(Tensor(x_s), Tensor(rec_s), Tensor(x_t), Tensor(rec_t)).item()
    assert got == pytest.approx(want, abs=1e-12)
    with pytest.raises(ShapeError):
        cycle_loss(Tensor(x_s), Tensor(x_s[:1]), Tensor(x_t), Tensor(x_t))


class _Identity:
    def __call__(self, x):
        return x


class _ConstDisc:
    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 1, 1, 1), self.value))


def test_objective_identity_generators_zero_cycle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 1, 4, 4))
    parts = translation_objective(Tensor(x), Tensor(x), _Identity(), _Identity(),
                                  _ConstDisc(0.5), _ConstDisc(0.5), TINY)
    assert parts["cycle"].item() == 0.0
    assert parts["g_total"].item() == pytest.approx(parts["g_adv"].item(), abs=1e-12)
    assert parts["g_adv"].item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_objective_additivity_and_zero_networks():
    rng = np.random.default_rng(2)
    x_s = rng.normal(size=(2, 1, 16, 16)) * 0.5
    x_t = rng.normal(size=(2, 1, 16, 16)) * 0.5
    nets, _ = build_translation_nets(TINY, seed=0)
    for net in nets.values():
        net.load_state_dict({k: np.zeros_like(v) for k, v in net.state_dict().items()})
    parts = translation_objective(Tensor(x_s), Tensor(x_t), nets["g_s2t"], nets["g_t2s"],
                                  nets["d_tgt"], nets["d_src"], TINY)
    lam = TINY.lambda_cycle
    # additivity of the three component terms
    assert parts["g_total"].item() == pytest.approx(
        parts["g_adv"].item() + lam * parts["cycle"].item(), abs=1e-9)
    # zero networks: every disc output 0.5, generators output exactly 0
    assert parts["d_tgt"].item() == pytest.approx(2 * math.log(2), abs=1e-9)
    assert parts["d_src"].item() == pytest.approx(2 * math.log(2), abs=1e-9)
    assert parts["g_adv"].item() == pytest.approx(2 * math.log(2), abs=1e-9)
    want_cycle = np.abs(x_s).mean() + np.abs(x_t).mean()
    assert parts["cycle"].item() == pytest.approx(want_cycle, abs=1e-12)

    lam0 = TranslationConfig(
        lambda_cycle=0.0, epochs=1,
        generator=TINY.generator, discriminator=TINY.discriminator)
    parts0 = translation_objective(Tensor(x_s), Tensor(x_t), nets["g_s2t"], nets["g_t2s"],
                                   nets["d_tgt"], nets["d_src"], lam0)
    assert parts0["g_total"].item() == pytest.approx(parts0["g_adv"].item(), abs=1e-12)


def test_player_updates_are_isolated():
    rng = np.random.default_rng(3)
    x_s = Tensor(rng.normal(size=(2, 1, 16, 16)))
    x_t = Tensor(rng.normal(size=(2, 1, 16, 16)))
    nets, optims = build_translation_nets(TINY, seed=1)
    g_before = {k: v.copy() for net in ("g_s2t", "g_t2s")
                for k, v in nets[net].state_dict().items()}
    with no_grad():
        fake_tgt = nets["g_s2t"](x_s)
    optims["d_tgt"].zero_grad()
    gan_loss_discriminator(nets["d_tgt"](x_t), nets["d_tgt"](fake_tgt), EPS).backward()
    optims["d_tgt"].step()
    g_after = {k: v for net in ("g_s2t", "g_t2s")
               for k, v in nets[net].state_dict().items()}
    for k in g_before:
        np.testing.assert_array_equal(g_before[k], g_after[k])

    d_before = {k: v.copy() for k, v in nets["d_tgt"].state_dict().items()}
    for p in nets["d_tgt"].parameters():
        p.requires_grad = False
    optims["gen"].zero_grad()
    loss = gan_loss_generator(nets["d_tgt"](nets["g_s2t"](x_s)), "non_saturating", EPS)
    loss.backward()
    optims["gen"].step()
    for k, v in nets["d_tgt"].state_dict().items():
        np.testing.assert_array_equal(d_before[k], v)
    assert any(not np.array_equal(g_before[f"s2t.{k}"[4:]], v)
               for k, v in nets["g_s2t"].state_dict().items())


def _toy_domain(seed, n_slices=4, hw=8):
    rng = np.random.default_rng(seed)
    vol = Volume(np.clip(rng.normal(size=(hw, hw, n_slices)) * 0.4, -0.95, 0.95), (1, 1, 1))
    return vol


def test_train_translation_step_count_and_determinism():
    source = [("s0", _toy_domain(0), None)]
    target = [("t0", _toy_domain(1))]
    nets1, _, hist1, steps1 = train_translation(source, target, TINY, seed=5)
    assert steps1 == 1  # 4 slices, batch 4, 1 epoch
    nets2, _, hist2, steps2 = train_translation(source, target, TINY, seed=5)
    assert hist1 == hist2
    for k, v in nets1["g_s2t"].state_dict().items():
        np.testing.assert_array_equal(v, nets2["g_s2t"].state_dict()[k])
    with pytest.raises(ValidationError):
        train_translation([], target, TINY, seed=0)


def test_train_translation_reduces_cycle_loss_on_shared_domain():
    cfg = TranslationConfig(
        epochs=40, batch_size=4, lr=2e-4,
        generator=GeneratorConfig(base_width=2, res_blocks=1),
        discriminator=DiscriminatorConfig(base_width=2))
    vol = _toy_domain(7)
    _, _, hist, steps = train_translation([("s0", vol, None)], [("t0", vol)], cfg, seed=9)
    cyc = [v for s, n, v in hist if n == "cycle"]
    assert len(cyc) == steps == 40
    assert cyc[-1] < cyc[0]


def test_lambda_pulls_cycle_error_down():
    gen = GeneratorConfig(base_width=2, res_blocks=1)
    disc = DiscriminatorConfig(base_width=2)
    source = [("s0", _toy_domain(11), None)]
    target = [("t0", _toy_domain(12))]
    final = {}
    for lam in (0.0, 1e4):
        cfg = TranslationConfig(lambda_cycle=lam, epochs=30, batch_size=4,
                                generator=gen, discriminator=disc)
        _, _, hist, _ = train_translation(source, target, cfg, seed=13)
        final[lam] = np.mean([v for s, n, v in hist if n == "cycle"][-5:])
    assert final[1e4] < final[0.0]


def test_translate_dataset_contract():
    rng = np.random.default_rng(4)
    nets, _ = build_translation_nets(TINY, seed=2)
    lab = LabelVolume(rng.integers(0, 3, size=(8, 8, 3)), (1, 1, 1))
    vol = _toy_domain(20, n_slices=3)
    mapped = translate_dataset(nets["g_s2t"], [("s0", vol, lab)])
    assert len(mapped) == 1
    vid, mvol, mlab = mapped[0]
    assert mvol.shape == vol.shape
    assert np.abs(mvol.data).max() < 1.0
    np.testing.assert_array_equal(mlab.data, lab.data)  # masks untouched
