import numpy as np
import pytest
import torch

from dialgan.diffcore import (
    ShapeError,
    activation,
    as_tensor4,
    backward,
    check_finite,
    NonFiniteError,
    conv2d,
    conv2d_transpose,
    numerical_grad,
    precision,
    relative_error,
)
from oracles import conv2d_loop


def test_identity_kernel():
    x = torch.arange(9.0).view(1, 1, 3, 3)
    assert torch.equal(conv2d(x, torch.ones(1, 1, 1, 1)), x)


def test_hand_convolution():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    out = conv2d(x, torch.ones(1, 1, 2, 2))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 10.0


def test_downsampling_size():
    out = conv2d(torch.zeros(1, 1, 128, 128), torch.zeros(1, 1, 4, 4), stride=2, pad=1)
    assert out.shape[-2:] == (64, 64)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    g = torch.Generator().manual_seed(stride * 10 + pad)
    with precision(torch.float64):
        x = torch.randn(2, 3, 6, 5, generator=g, dtype=torch.float64)
        k = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
        out = conv2d(x, k, stride, pad).numpy()
    np.testing.assert_allclose(out, conv2d_loop(x.numpy(), k.numpy(), stride, pad), atol=1e-10)


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ShapeError):
        conv2d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 4, 4))


@pytest.mark.parametrize("stride,pad,size", [(1, 0, 4), (2, 1, 4), (1, 1, 6), (2, 1, 8)])
def test_transpose_is_adjoint(stride, pad, size):
    g = torch.Generator().manual_seed(size + stride)
    a = torch.randn(1, 2, size, size, generator=g)
    k = torch.randn(3, 2, 4 if stride == 2 else 3, 4 if stride == 2 else 3, generator=g)
    ca = conv2d(a, k, stride, pad)
    b = torch.randn(ca.shape, generator=g)
    lhs = (ca * b).sum()
    rhs = (a * conv2d_transpose(b, k, stride, pad, output_size=a.shape)).sum()
    assert abs(lhs - rhs).item() <= 1e-5 * max(1.0, abs(lhs.item()))


def test_adjoint_random_1x1x4x4():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(1, 1, 4, 4, generator=g)
    b = torch.randn(1, 1, 4, 4, generator=g)
    k = torch.randn(1, 1, 3, 3, generator=g)
    lhs = (conv2d(a, k, 1, 1) * b).sum()
    rhs = (a * conv2d_transpose(b, k, 1, 1)).sum()
    assert abs(lhs - rhs).item() < 1e-5


def test_transpose_identity_and_upsampling_size():
    x = torch.randn(1, 1, 5, 5)
    assert torch.equal(conv2d_transpose(x, torch.ones(1, 1, 1, 1)), x)
    up = conv2d_transpose(torch.zeros(1, 1, 64, 64), torch.zeros(1, 1, 4, 4), stride=2, pad=1)
    assert up.shape[-2:] == (128, 128)


def test_transpose_shape_mismatch():
    with pytest.raises(ShapeError):
        conv2d_transpose(torch.zeros(1, 2, 4, 4), torch.zeros(3, 1, 3, 3))


def test_activations():
    x = torch.tensor([-1.0, 2.0, 0.0])
    assert activation(x, "relu").tolist() == [0.0, 2.0, 0.0]
    assert activation(torch.tensor([-1.0]), "leaky_relu").item() == pytest.approx(-0.2)
    assert activation(torch.tensor([0.0]), "tanh").item() == 0.0
    with pytest.raises(ValueError):
        activation(x, "gelu")


def test_backward_sum_is_ones():
    x = torch.randn(2, 3, 4, 5, requires_grad=True)
    (g,) = backward(x.sum(), [x])
    assert torch.equal(g, torch.ones_like(x))


def test_backward_square():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    (g,) = backward((x * x).sum(), [x])
    assert g.tolist() == [2.0, 4.0]


def test_backward_disconnected_leaf_and_nonscalar():
    x = torch.randn(3, requires_grad=True)
    y = torch.randn(3, requires_grad=True)
    gx, gy = backward(x.sum(), [x, y])
    assert torch.equal(gy, torch.zeros(3))
    with pytest.raises(ShapeError):
        backward(x * 2, [x])


def _three_op_graph(x, k):
    return activation(conv2d(activation(x, "tanh"), k, 1, 1), "leaky_relu").pow(2).sum()


@pytest.mark.parametrize("dtype,h,tol", [(torch.float32, 1e-3, 1e-3), (torch.float64, 1e-5, 1e-6)])
def test_random_graph_matches_finite_difference(dtype, h, tol):
    g = torch.Generator().manual_seed(3)
    x64 = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    k64 = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
    x = x64.to(dtype).requires_grad_(True)
    (analytic,) = backward(_three_op_graph(x, k64.to(dtype)), [x])
    # the difference quotient is evaluated in 64-bit so the oracle is not limited by f32 rounding
    numeric = numerical_grad(lambda t: _three_op_graph(t, k64), x.detach().double(), h)
    assert relative_error(analytic, numeric) < tol


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh"])
def test_activation_gradients(kind):
    with precision(torch.float64):
        # keep away from the kink at zero
        x = (torch.rand(20, dtype=torch.float64) * 0.8 + 0.1) * torch.tensor([1.0, -1.0]).repeat(10)
        x.requires_grad_(True)
        (analytic,) = backward(activation(x, kind).pow(2).sum(), [x])
        numeric = numerical_grad(lambda t: activation(t, kind).pow(2).sum(), x, 1e-6)
    assert relative_error(analytic, numeric) < 1e-6


def test_conv_transpose_gradients():
    with precision(torch.float64):
        g = torch.Generator().manual_seed(5)
        x = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64).requires_grad_(True)
        k = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64).requires_grad_(True)
        f = lambda a, b: conv2d_transpose(a, b, 2, 1).pow(2).sum()
        gx, gk = backward(f(x, k), [x, k])
        assert relative_error(gx, numerical_grad(lambda t: f(t, k), x, 1e-6)) < 1e-6
        assert relative_error(gk, numerical_grad(lambda t: f(x, t), k, 1e-6)) < 1e-6


def test_deterministic():
    g = torch.Generator().manual_seed(9)
    x = torch.randn(1, 3, 16, 16, generator=g)
    k = torch.randn(8, 3, 4, 4, generator=g)
    assert torch.equal(conv2d(x, k, 2, 1), conv2d(x, k, 2, 1))


def test_tensor4_and_finite():
    assert as_tensor4([[1.0, 2.0]]).shape == (1, 1, 1, 2)
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([1.0, float("nan")]))
    with pytest.raises(ShapeError):
        as_tensor4(torch.zeros(0, 2))
