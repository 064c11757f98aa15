"""Shape/range contracts, init determinism, gradient and checkpoint checks."""

import numpy as np
import pytest

from modaseg import nn
from modaseg.autodiff import Tensor, no_grad
from modaseg.errors import ConfigError, ShapeError
from modaseg.nets import (DiscriminatorConfig, GeneratorConfig, PatchDiscriminator,
                          ResNetGenerator, UNet2D, UNetConfig, init_params,
                          load_checkpoint, restore_model, restore_optimizer,
                          save_checkpoint)
from oracles import fd_gradient, rel_err

GEN_CFG = GeneratorConfig(base_width=4, res_blocks=2)
DISC_CFG = DiscriminatorConfig(in_channels=1, base_width=4)
UNET_CFG = UNetConfig(base_width=4, levels=3)


def zero_params(net):
    net.load_state_dict({k: np.zeros_like(v) for k, v in net.state_dict().items()})
    return net


def test_init_deterministic_and_seed_sensitive():
    a = init_params(GEN_CFG, 3)
    b = init_params(GEN_CFG, 3)
    c = init_params(GEN_CFG, 4)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(),
                                          c.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))
    for p in a.parameters():
        assert np.isfinite(p.data).all()


def test_zero_width_config_rejected():
    with pytest.raises(ConfigError):
        GeneratorConfig(base_width=0)
    with pytest.raises(ConfigError):
        UNetConfig(num_classes=0)


def test_generator_contracts():
    g = init_params(GEN_CFG, 0)
    x = Tensor(np.random.default_rng(0).normal(size=(8, 1, 64, 64)))
    with no_grad():
        y = g(x)
    assert y.shape == (8, 1, 64, 64)
    assert np.abs(y.data).max() < 1.0
    with pytest.raises(ShapeError):
        g(Tensor(np.zeros((1, 1, 30, 30))))
    zero_params(g)
    with no_grad():
        y0 = g(x)
    np.testing.assert_array_equal(y0.data, np.zeros_like(y0.data))


def test_generator_shape_contract_sizes():
    g = init_params(GEN_CFG, 1)
    for hw in (32, 64, 128):
        with no_grad():
            assert g(Tensor(np.zeros((1, 1, hw, hw)))).shape == (1, 1, hw, hw)


def test_discriminator_contracts():
    d = init_params(DISC_CFG, 0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 1, 64, 64))
    with no_grad():
        y = d(Tensor(x))
    assert y.shape == (3, 1, 8, 8)  # declared factor 8
    assert ((y.data > 0) & (y.data < 1)).all()
    perm = [2, 0, 1]
    with no_grad():
        yp = d(Tensor(x[perm]))
    np.testing.assert_array_equal(yp.data, y.data[perm])
    with pytest.raises(ShapeError):
        d(Tensor(np.zeros((1, 2, 64, 64))))
    zero_params(d)
    with no_grad():
        y0 = d(Tensor(x))
    np.testing.assert_array_equal(y0.data, np.full_like(y0.data, 0.5))


def test_discriminator_shape_sizes():
    d = init_params(DISC_CFG, 2)
    for hw in (32, 64, 128):
        with no_grad():
            assert d(Tensor(np.zeros((1, 1, hw, hw)))).shape == (1, 1, hw // 8, hw // 8)


def test_unet_contracts():
    u = init_params(UNET_CFG, 0)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 1, 64, 64))
    with no_grad():
        p = u(Tensor(x))
    assert p.shape == (4, 3, 64, 64)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
    assert ((p.data >= 0) & (p.data <= 1)).all()
    # identical slices in one batch give identical maps
    xx = np.concatenate([x[:1], x[:1]], axis=0)
    with no_grad():
        pp = u(Tensor(xx))
    np.testing.assert_array_equal(pp.data[0], pp.data[1])
    with pytest.raises(ShapeError):
        u(Tensor(np.zeros((1, 1, 30, 30))))
    zero_params(u)
    with no_grad():
        p0 = u(Tensor(x))
    np.testing.assert_allclose(p0.data, 1.0 / 3.0, rtol=0, atol=1e-15)


def test_unet_shape_sizes_and_residual_variant():
    for residual in (False, True):
        u = init_params(UNetConfig(base_width=4, levels=3, residual=residual), 5)
        for hw in (32, 64):
            with no_grad():
                assert u(Tensor(np.zeros((1, 1, hw, hw)))).shape == (1, 3, hw, hw)


def net_fd_check(net, x, n_coords=10, h=1e-5, tol=1e-5, probe_seed=0, train_mode=False):
    """Weighted-sum probe loss; analytic grads vs central differences."""
    net.train(train_mode)
    rng = np.random.default_rng(probe_seed)
    with no_grad():
        out0 = net(Tensor(x))
    wts = rng.normal(size=out0.shape)

    def scalar():
        with no_grad():
            return float((net(Tensor(x)).data * wts).sum())

    loss = (net(Tensor(x)) * Tensor(wts)).sum()
    loss.backward()
    named = list(net.named_parameters())
    flat = [(name, p, i) for name, p in named for i in range(p.data.size)]
    picks = rng.choice(len(flat), size=n_coords, replace=False)
    worst = 0.0
    for k in picks:
        name, p, i = flat[k]
        old = p.data.flat[i]
        p.data.flat[i] = old + h
        up = scalar()
        p.data.flat[i] = old - h
        dn = scalar()
        p.data.flat[i] = old
        fd = (up - dn) / (2 * h)
        an = 0.0 if p.grad is None else p.grad.flat[i]
        worst = max(worst, rel_err(an, fd, floor=1e-7))
    assert worst < tol, f"worst relative error {worst}"


def test_generator_param_gradients_match_fd():
    g = init_params(GEN_CFG, 7)
    x = np.random.default_rng(3).normal(size=(2, 1, 16, 16))
    net_fd_check(g, x)


def test_discriminator_param_gradients_match_fd():
    d = init_params(DISC_CFG, 8)
    x = np.random.default_rng(4).normal(size=(2, 1, 16, 16))
    net_fd_check(d, x)


def test_unet_param_gradients_match_fd():
    u = init_params(UNET_CFG, 9)
    x = np.random.default_rng(5).normal(size=(2, 1, 16, 16))
    net_fd_check(u, x)


def test_unet_input_gradients_match_fd():
    u = init_params(UNET_CFG, 10).eval()
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(1, 1, 8, 8))
    wts = rng.normal(size=(1, 3, 8, 8))

    def scalar(arr):
        with no_grad():
            return float((u(Tensor(arr)).data * wts).sum())

    x = Tensor(x0, requires_grad=True)
    (u(x) * Tensor(wts)).sum().backward()
    for i in rng.choice(x0.size, size=8, replace=False):
        fd = fd_gradient(scalar, x0, i, 1e-5)
        assert rel_err(x.grad.flat[i], fd, floor=1e-7) < 1e-5


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    u = init_params(UNET_CFG, 11)
    opt = nn.Adam(u.named_parameters(), lr=1e-3)
    x = np.random.default_rng(7).normal(size=(2, 1, 16, 16))
    # take one step so optimizer state and BN buffers are nontrivial
    loss = (u(Tensor(x)) * Tensor(np.ones((2, 3, 16, 16)))).sum()
    opt.zero_grad()
    loss.backward()
    opt.step()
    u.eval()
    with no_grad():
        before = u(Tensor(x)).data.copy()
    path = tmp_path / "ckpt.blob"
    save_checkpoint(path, phase="supervised", step=1, seed=11, config_hash="abc",
                    models={"unet": u}, optimizers={"unet": opt}, extra={"note": 1})
    meta, arrays = load_checkpoint(path, expected_hash="abc")
    assert meta["phase"] == "supervised" and meta["step"] == 1 and meta["seed"] == 11
    u2 = init_params(UNET_CFG, 99).eval()
    restore_model(u2, arrays, "unet")
    with no_grad():
        after = u2(Tensor(x)).data
    np.testing.assert_array_equal(before, after)
    opt2 = nn.Adam(u2.named_parameters(), lr=5.0)
    restore_optimizer(opt2, meta, arrays, "unet")
    assert opt2.t == opt.t and opt2.lr == opt.lr
    for n in opt.m:
        np.testing.assert_array_equal(opt.m[n], opt2.m[n])


def test_checkpoint_hash_guard(tmp_path):
    g = init_params(GEN_CFG, 0)
    path = tmp_path / "g.blob"
    save_checkpoint(path, phase="translation", step=0, seed=0, config_hash="h1",
                    models={"g": g})
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected_hash="other")
    meta, _ = load_checkpoint(path, expected_hash="other", allow_mismatch=True)
    assert meta["config_hash"] == "h1"


def test_checkpoint_file_bytes_deterministic(tmp_path):
    g = init_params(GEN_CFG, 1)
    p1, p2 = tmp_path / "a.blob", tmp_path / "b.blob"
    for p in (p1, p2):
        save_checkpoint(p, phase="translation", step=3, seed=1, config_hash="h",
                        models={"g": g})
    assert p1.read_bytes() == p2.read_bytes()
