"""Differentiable tensor primitives shared by every network and loss.

Tensors are 4-D ``(batch, channels, height, width)`` torch tensors. The
reverse-mode graph is torch's autograd tape; the helpers here pin down the
contracts (shape checks, zero padding, finite values, leaky slope) that the
rest of the package relies on, plus a central finite-difference gradient
used to validate them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("relu", "leaky_relu", "tanh")


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operator contract."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""


def as_tensor4(data, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=dtype or torch.get_default_dtype())
    while t.dim() < 4:
        t = t.unsqueeze(0)
    if t.dim() != 4 or min(t.shape) < 1:
        raise ShapeError(f"expected a non-empty 4-D tensor, got shape {tuple(t.shape)}")
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(input: torch.Tensor, kernel: torch.Tensor, stride: int = 1, pad: int = 0,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """Zero-padded 2-D cross-correlation, kernel shaped ``(outC, inC, kh, kw)``."""
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} pad={pad}")
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {input.shape[1]} channels, kernel expects {kernel.shape[1]}")
    oh = conv_output_size(input.shape[2], kernel.shape[2], stride, pad)
    ow = conv_output_size(input.shape[3], kernel.shape[3], stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive output size {oh}x{ow}")
    return F.conv2d(input, kernel, bias, stride=stride, padding=pad)


def conv2d_transpose(input: torch.Tensor, kernel: torch.Tensor, stride: int = 1, pad: int = 0,
                     bias: torch.Tensor | None = None,
                     output_size: Sequence[int] | None = None) -> torch.Tensor:
    """Adjoint of :func:`conv2d` for the same ``(outC, inC, kh, kw)`` kernel.

    Maps ``outC`` channels back to ``inC``. ``output_size`` resolves the
    ambiguity of strided convs whose forward map floors the spatial size.
    """
    if input.dim() != 4 or kernel.dim() != 4:
        raise ShapeError("conv2d_transpose expects 4-D input and kernel")
    if input.shape[1] != kernel.shape[0]:
        raise ShapeError(f"input has {input.shape[1]} channels, kernel produces {kernel.shape[0]}")
    kh, kw = kernel.shape[2:]
    base_h = (input.shape[2] - 1) * stride - 2 * pad + kh
    base_w = (input.shape[3] - 1) * stride - 2 * pad + kw
    extra = (0, 0)
    if output_size is not None:
        extra = (output_size[-2] - base_h, output_size[-1] - base_w)
        if not all(0 <= e < max(stride, 1) for e in extra):
            raise ShapeError(f"output size {tuple(output_size)} unreachable from {tuple(input.shape)}")
    if base_h + extra[0] < 1 or base_w + extra[1] < 1:
        raise ShapeError("non-positive output size")
    return F.conv_transpose2d(input, kernel, bias, stride=stride, padding=pad, output_padding=extra)


def activation(input: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return F.relu(input)
    if kind == "leaky_relu":
        return F.leaky_relu(input, LEAKY_SLOPE)
    if kind == "tanh":
        return torch.tanh(input)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def instance_norm(input: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardisation without learned affine terms."""
    return F.instance_norm(input, eps=eps)


def backward(output: torch.Tensor, leaves: Sequence[torch.Tensor],
             create_graph: bool = False) -> list[torch.Tensor]:
    """Gradients of a scalar ``output`` with respect to each leaf.

    Leaves the output does not depend on get a zero gradient. With
    ``create_graph`` the returned gradients are themselves differentiable,
    which the gradient penalty needs.
    """
    if output.numel() != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    grads = torch.autograd.grad(output.reshape(()), list(leaves), create_graph=create_graph,
                                allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]


def numerical_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                   h: float = 1e-3) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(f(x))
            flat[i] = orig - h
            down = float(f(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Max-norm relative error, robust to all-zero references."""
    a, b = a.detach().double(), b.detach().double()
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / scale


@contextlib.contextmanager
def precision(dtype: torch.dtype = torch.float64):
    """Temporarily switch the default dtype (64-bit mode is for gradient tests)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def parameter_checksum(params: Iterable[torch.Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
