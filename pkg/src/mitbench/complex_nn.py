"""Complex-valued layers built from real tensors.

A complex feature map is a ``ComplexTensor`` holding a real and an imaginary
plane of identical shape (batch, channels, height, width). A complex kernel
``W = A + iB`` acts on ``h = x + iy`` as

    W * h = (A*x - B*y) + i(B*x + A*y)

which is evaluated as one real convolution with the block kernel
[[A, -B], [B, A]] on the stacked planes [x; y].
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


class ComplexTensor(NamedTuple):
    real: Tensor
    imag: Tensor

    @property
    def shape(self):
        return self.real.shape

    def abs(self) -> Tensor:
        return torch.sqrt(self.real ** 2 + self.imag ** 2)

    def numpy(self) -> np.ndarray:
        return self.real.detach().cpu().numpy() + 1j * self.imag.detach().cpu().numpy()

    @classmethod
    def from_numpy(cls, z: np.ndarray, dtype=torch.float32) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(torch.as_tensor(z.real.copy(), dtype=dtype), torch.as_tensor(z.imag.copy(), dtype=dtype))


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: real/imaginary shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")


def cconv(A: Tensor, B: Tensor, h: ComplexTensor, bias_re: Tensor | None = None,
          bias_im: Tensor | None = None, stride: int = 1, padding: int = 0) -> ComplexTensor:
    _check_pair(A, B, "kernel")
    _check_pair(h.real, h.imag, "input")
    if h.real.shape[1] != A.shape[1]:
        raise ValueError(f"input has {h.real.shape[1]} channels, kernel expects {A.shape[1]}")
    n_out = A.shape[0]
    weight = torch.cat([torch.cat([A, -B], dim=1), torch.cat([B, A], dim=1)], dim=0)
    bias = None
    if bias_re is not None:
        bias = torch.cat([bias_re, bias_im])
    out = F.conv2d(torch.cat([h.real, h.imag], dim=1), weight, bias, stride, padding)
    return ComplexTensor(out[:, :n_out], out[:, n_out:])


def cdense(A: Tensor, B: Tensor, z: ComplexTensor, bias_re: Tensor | None = None,
           bias_im: Tensor | None = None) -> ComplexTensor:
    """Complex matrix-vector product; ``z`` planes are (..., n_in)."""
    _check_pair(A, B, "weight")
    _check_pair(z.real, z.imag, "input")
    if z.real.shape[-1] != A.shape[1]:
        raise ValueError(f"input length {z.real.shape[-1]} does not match weight {tuple(A.shape)}")
    re = z.real @ A.T - z.imag @ B.T
    im = z.real @ B.T + z.imag @ A.T
    if bias_re is not None:
        re = re + bias_re
        im = im + bias_im
    return ComplexTensor(re, im)


def modrelu(z: ComplexTensor, b: Tensor) -> ComplexTensor:
    """ReLU on the modulus, phase kept: (|z|+b) z/|z| if |z|+b >= 0 else 0.

    ``b`` has one entry per channel (dim 1). The output is 0 at z = 0 and
    the gradient there is taken as 0.
    """
    sq = z.real ** 2 + z.imag ** 2
    nonzero = sq > 0
    mag = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    shape = (1, -1) + (1,) * (z.real.dim() - 2)
    scale = torch.where(nonzero, F.relu(mag + b.view(shape)) / mag, torch.zeros_like(mag))
    return ComplexTensor(z.real * scale, z.imag * scale)


def cmaxpool(z: ComplexTensor, window: int = 2) -> ComplexTensor:
    """Keep, per window, the element of largest modulus (first in row-major on ties)."""
    h, w = z.real.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"spatial size {h}x{w} not divisible by window {window}")
    _, idx = F.max_pool2d(z.real ** 2 + z.imag ** 2, window, return_indices=True)
    flat = idx.flatten(start_dim=2)
    re = torch.gather(z.real.flatten(start_dim=2), 2, flat).view_as(idx)
    im = torch.gather(z.imag.flatten(start_dim=2), 2, flat).view_as(idx)
    return ComplexTensor(re, im)


def c2r(z: ComplexTensor) -> Tensor:
    """C complex channels -> 2C real channels: real planes first, then imaginary."""
    return torch.cat([z.real, z.imag], dim=1)


def r2c(x: Tensor) -> ComplexTensor:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"need an even channel count, got {c}")
    return ComplexTensor(x[:, : c // 2], x[:, c // 2:])


def ccat(zs: Sequence[ComplexTensor]) -> ComplexTensor:
    """Channel concatenation through the C2R / R2C bridge."""
    halves = [c2r(z) for z in zs]
    re = [h[:, : h.shape[1] // 2] for h in halves]
    im = [h[:, h.shape[1] // 2:] for h in halves]
    return r2c(torch.cat(re + im, dim=1))


def upsample2x(z: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(F.interpolate(z.real, scale_factor=2, mode="nearest"),
                         F.interpolate(z.imag, scale_factor=2, mode="nearest"))


# ---------------------------------------------------------------------------
# initialisation and modules
# ---------------------------------------------------------------------------

def complex_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rayleigh(1/sqrt(fan_in)) magnitudes with uniform phases on [-pi, pi)."""
    mag = rng.rayleigh(scale=1.0 / math.sqrt(fan_in), size=shape)
    phase = rng.uniform(-math.pi, math.pi, size=shape)
    return mag * np.cos(phase), mag * np.sin(phase)


class ComplexConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel_size, kernel_size)
        a, b = complex_init(shape, in_ch * kernel_size ** 2, rng or np.random.default_rng(0))
        self.A = nn.Parameter(torch.as_tensor(a, dtype=torch.float32))
        self.B = nn.Parameter(torch.as_tensor(b, dtype=torch.float32))
        self.bias_re = nn.Parameter(torch.zeros(out_ch))
        self.bias_im = nn.Parameter(torch.zeros(out_ch))

    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return cconv(self.A, self.B, z, self.bias_re, self.bias_im, self.stride, self.padding)


class ComplexLinear(nn.Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        a, b = complex_init((n_out, n_in), n_in, rng or np.random.default_rng(0))
        self.A = nn.Parameter(torch.as_tensor(a, dtype=torch.float32))
        self.B = nn.Parameter(torch.as_tensor(b, dtype=torch.float32))
        self.bias_re = nn.Parameter(torch.zeros(n_out))
        self.bias_im = nn.Parameter(torch.zeros(n_out))

    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return cdense(self.A, self.B, z, self.bias_re, self.bias_im)


class ModReLU(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.b = nn.Parameter(torch.zeros(channels))

    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return modrelu(z, self.b)


class ComplexMaxPool2d(nn.Module):
    def __init__(self, window: int = 2):
        super().__init__()
        self.window = window

    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return cmaxpool(z, self.window)


class ComplexUpsample(nn.Module):
    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return upsample2x(z)


def real_dense_init(layer: nn.Linear, rng: np.random.Generator) -> nn.Linear:
    """Glorot-uniform weights and zero bias drawn from a numpy generator."""
    n_out, n_in = layer.weight.shape
    lim = math.sqrt(6.0 / (n_in + n_out))
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(rng.uniform(-lim, lim, (n_out, n_in))))
        layer.bias.zero_()
    return layer


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------

def _flat_leaves(obj) -> list[Tensor]:
    if isinstance(obj, Tensor):
        return [obj]
    if isinstance(obj, (tuple, list)):
        return [t for o in obj for t in _flat_leaves(o)]
    raise TypeError(f"unsupported input type {type(obj)}")


def _scalarize(out, weights: list[Tensor] | None) -> tuple[Tensor, list[Tensor]]:
    leaves = _flat_leaves(out)
    if weights is None:
        gen = torch.Generator().manual_seed(1234)
        weights = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in leaves]
    return sum((t * w).sum() for t, w in zip(leaves, weights)), weights


def grad_check(fn: Callable, inputs, params: Sequence[Tensor] = (), eps: float = 1e-5) -> float:
    """Max gradient error of ``fn`` against central finite differences.

    ``fn(*inputs)`` may return a tensor, a ComplexTensor or a tuple of them;
    it is reduced to a scalar with fixed random weights. Every real degree
    of freedom in ``inputs`` and ``params`` (real and imaginary planes alike)
    is perturbed. The error is max|analytic - numeric| divided by the largest
    gradient magnitude, so it is scale free. Run in float64.
    """
    inputs = tuple(inputs)
    leaves = _flat_leaves(list(inputs)) + list(params)
    for t in leaves:
        if t.dtype != torch.float64:
            raise ValueError("grad_check needs float64 tensors")
        t.requires_grad_(True)
        t.grad = None
    loss, weights = _scalarize(fn(*inputs), None)
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    worst = 0.0
    scale = 0.0
    with torch.no_grad():
        for t, g in zip(leaves, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            num = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                fp = _scalarize(fn(*inputs), weights)[0].item()
                flat[i] = old - eps
                fm = _scalarize(fn(*inputs), weights)[0].item()
                flat[i] = old
                num[i] = (fp - fm) / (2 * eps)
            worst = max(worst, (g.reshape(-1) - num).abs().max().item())
            scale = max(scale, g.abs().max().item(), num.abs().max().item())
    return worst / scale if scale > 0 else worst
