"""Finite-difference validation of every autodiff primitive."""

import numpy as np
import pytest

from modaseg import autodiff as ad
from modaseg.autodiff import Tensor
from modaseg.errors import ShapeError
from oracles import fd_gradient, rel_err


def check_op(build, x0, n_coords=10, h=1e-5, tol=5e-6, seed=0):
    """Compare analytic d(probe)/dx against central differences.

    ``build`` maps a Tensor to the op output; the probe loss is a fixed
    random weighting of the output so every element contributes.
    """
    rng = np.random.default_rng(seed)
    wshape = build(Tensor(x0)).shape
    wts = rng.normal(size=wshape)

    def scalar(arr):
        return float((build(Tensor(arr)).data * wts).sum())

    x = Tensor(x0, requires_grad=True)
    loss = (build(x) * Tensor(wts)).sum()
    loss.backward()
    idxs = rng.choice(x0.size, size=min(n_coords, x0.size), replace=False)
    for i in idxs:
        fd = fd_gradient(scalar, x0, i, h)
        an = x.grad.flat[i]
        assert rel_err(an, fd) < tol, f"coord {i}: analytic {an} vs fd {fd}"


RNG = np.random.default_rng(11)
C_ADD = RNG.normal(size=(3, 4))
C_MUL = RNG.normal(size=(3, 4))
C_DIV = RNG.normal(size=(3, 4)) + 3.0
C_CAT = RNG.normal(size=(2, 2, 4, 4))


@pytest.mark.parametrize("name,build,x0", [
    ("add", lambda x: x + Tensor(C_ADD), RNG.normal(size=(3, 4))),
    ("mul", lambda x: x * Tensor(C_MUL), RNG.normal(size=(3, 4))),
    ("div", lambda x: x / Tensor(C_DIV), RNG.normal(size=(3, 4))),
    ("rdiv", lambda x: 2.5 / x, RNG.normal(size=(3, 4)) + 3.0),
    ("pow", lambda x: x ** 3, RNG.normal(size=(3, 4)) + 2.0),
    ("exp", ad.exp, RNG.normal(size=(3, 4))),
    ("log", ad.log, RNG.random((3, 4)) + 0.5),
    ("sqrt", ad.sqrt, RNG.random((3, 4)) + 0.5),
    ("abs", ad.abs_, RNG.normal(size=(3, 4)) + 0.2),
    ("tanh", ad.tanh, RNG.normal(size=(3, 4))),
    ("sigmoid", ad.sigmoid, RNG.normal(size=(3, 4))),
    ("relu", ad.relu, RNG.normal(size=(3, 4)) + 0.3),
    ("lrelu", lambda x: ad.leaky_relu(x, 0.2), RNG.normal(size=(3, 4)) + 0.3),
    ("clip", lambda x: ad.clip(x, -0.5, 0.5), RNG.normal(size=(3, 4))),
    ("sum_all", lambda x: x.sum(), RNG.normal(size=(3, 4))),
    ("sum_ax", lambda x: x.sum(axis=1, keepdims=True), RNG.normal(size=(3, 4))),
    ("mean_axes", lambda x: x.mean(axis=(0, 2), keepdims=True), RNG.normal(size=(2, 3, 4))),
    ("reshape", lambda x: x.reshape(4, 3), RNG.normal(size=(3, 4))),
    ("softmax", ad.softmax_channels, RNG.normal(size=(2, 3, 4, 4))),
])
def test_elementwise_ops(name, build, x0):
    check_op(build, x0)


def test_broadcast_add_and_mul_grads():
    x0 = RNG.normal(size=(2, 3, 4, 4))
    bias = RNG.normal(size=(3, 1, 1))
    check_op(lambda x: x + Tensor(bias), x0)
    # gradient w.r.t. the broadcast operand reduces correctly
    b = Tensor(bias, requires_grad=True)
    y = Tensor(x0) + b
    (y * Tensor(np.ones_like(x0))).sum().backward()
    np.testing.assert_allclose(b.grad, np.full((3, 1, 1), 2 * 16.0), rtol=1e-12)


@pytest.mark.parametrize("pad_mode", ["zeros", "reflect", "replicate"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_grads(pad_mode, stride):
    w0 = RNG.normal(size=(4, 3, 3, 3))
    b0 = RNG.normal(size=4)
    x0 = RNG.normal(size=(2, 3, 8, 8))
    check_op(lambda x: ad.conv2d(x, Tensor(w0), Tensor(b0), stride, 1, pad_mode), x0)
    check_op(lambda w: ad.conv2d(Tensor(x0), w, Tensor(b0), stride, 1, pad_mode), w0)
    check_op(lambda b: ad.conv2d(Tensor(x0), Tensor(w0), b, stride, 1, pad_mode), b0)


def test_conv_transpose2d_grads():
    w0 = RNG.normal(size=(3, 5, 3, 3))
    b0 = RNG.normal(size=5)
    x0 = RNG.normal(size=(2, 3, 6, 6))
    out = ad.conv_transpose2d(Tensor(x0), Tensor(w0), Tensor(b0))
    assert out.shape == (2, 5, 12, 12)
    check_op(lambda x: ad.conv_transpose2d(x, Tensor(w0), Tensor(b0)), x0)
    check_op(lambda w: ad.conv_transpose2d(Tensor(x0), w, Tensor(b0)), w0)
    check_op(lambda b: ad.conv_transpose2d(Tensor(x0), Tensor(w0), b), b0)


def test_pool_upsample_norm_concat_grads():
    check_op(ad.maxpool2x, RNG.normal(size=(2, 3, 6, 6)))
    check_op(ad.upsample2x, RNG.normal(size=(2, 3, 5, 5)))
    check_op(lambda x: ad.normalize_moments(x, (2, 3), 1e-5)[0],
             RNG.normal(size=(2, 3, 5, 5)), tol=1e-5)
    check_op(lambda x: ad.normalize_moments(x, (0, 2, 3), 1e-5)[0],
             RNG.normal(size=(2, 3, 5, 5)), tol=1e-5)
    check_op(lambda x: ad.concat([x, Tensor(C_CAT)], axis=1),
             RNG.normal(size=(2, 3, 4, 4)))


def test_chained_graph_and_grad_accumulation():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = (x * x + x).sum()  # d/dx = 2x + 1
    y.backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0, 7.0])
    y2 = x.sum()
    y2.backward()  # accumulates
    np.testing.assert_allclose(x.grad, [4.0, 6.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_reused_node_gradients():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = (y + y).sum()  # 2x^2 -> dz/dx = 4x
    z.backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = (x * 2).sum()
    assert y._backward is None and not y.requires_grad


def test_detach_stops_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x.detach() * 3.0 + x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [1.0, 1.0, 1.0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        ad.maxpool2x(Tensor(np.zeros((1, 1, 5, 4))))
