"""Layer primitives, weight normalisation, resizing and the Adam update.

Autodiff is delegated to torch; this module pins down the exact layer
semantics the generator and the feature network rely on (shape checks,
weight normalisation, the leaky-ReLU gradient at zero, box/nearest
resizing) plus a Catmull-Rom resize used only for dataset preparation.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError, TrainingError

WN_EPS = 1e-12


def _require_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.dim() != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {tuple(t.shape)}")


def weight_norm(direction: Tensor, gain: Tensor) -> Tensor:
    """Effective weight ``g * v / ||v||`` with the norm taken per output channel."""
    flat = direction.reshape(direction.shape[0], -1)
    norm = torch.sqrt((flat * flat).sum(dim=1) + WN_EPS)
    scale = (gain / norm).reshape((-1,) + (1,) * (direction.dim() - 1))
    return direction * scale


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(weight, 4, "conv2d weight")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: weight expects {weight.shape[1]} input channels, input has {x.shape[1]} "
            f"(input {tuple(x.shape)}, weight {tuple(weight.shape)})"
        )
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {tuple(x.shape[2:])}")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _require_ndim(x, 2, "dense input")
    _require_ndim(weight, 2, "dense weight")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: weight is {tuple(weight.shape)} but input has {x.shape[1]} features")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    # torch defines the gradient at exactly 0 as `slope`, which is what we want
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"slope must lie in [0, 1], got {slope}")
    return F.leaky_relu(x, slope)


def nearest_up2(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "nearest_up2 input")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def box_down2(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "box_down2 input")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"box_down2 needs even spatial dims, got {h}x{w}")
    return F.avg_pool2d(x, 2)


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic resampling matrix (n_out, n_in) with edge clamping.

    When shrinking, the kernel is stretched by the scale factor so that it
    also acts as the anti-aliasing filter.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        lo = math.floor(centre - 2 * support) + 1
        hi = math.ceil(centre + 2 * support)
        taps = np.arange(lo, hi)
        w = _cubic((taps - centre) / support)
        w /= w.sum()
        for tap, wt in zip(np.clip(taps, 0, n_in - 1), w):
            mat[i, tap] += wt
    return mat


def bicubic_to(x: Tensor, h: int, w: int) -> Tensor:
    """Catmull-Rom (a=-0.5) resize to ``h x w``. Not differentiable."""
    _require_ndim(x, 4, "bicubic_to input")
    if h < 1 or w < 1:
        raise ShapeError(f"bicubic_to target must be positive, got {h}x{w}")
    rows = _bicubic_matrix(x.shape[2], h)
    cols = _bicubic_matrix(x.shape[3], w)
    arr = x.detach().cpu().double().numpy()
    out = np.einsum("ij,ncjk,lk->ncil", rows, arr, cols)
    return torch.from_numpy(out).to(x.dtype)


def resize(x: Tensor, mode: str, size: tuple[int, int] | None = None) -> Tensor:
    if mode == "nearest_up2":
        return nearest_up2(x)
    if mode == "box_down2":
        return box_down2(x)
    if mode == "bicubic_to":
        if size is None:
            raise ValueError("bicubic_to needs a target size")
        return bicubic_to(x, *size)
    raise ValueError(f"unknown resize mode {mode!r}")


def he_normal(shape: Sequence[int], fan_in: int, generator: torch.Generator) -> Tensor:
    return torch.randn(tuple(shape), generator=generator) * math.sqrt(2.0 / fan_in)


class Conv2d(nn.Module):
    """Square-kernel convolution, optionally weight-normalised.

    With weight normalisation the trainable parameters are the direction
    ``weight_v`` and the per-output-channel gain ``weight_g``; the effective
    kernel is rebuilt on every forward pass.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int | None = None,
                 weight_norm: bool = True):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        self.weight_norm = weight_norm
        shape = (out_ch, in_ch, kernel, kernel)
        if weight_norm:
            self.weight_v = nn.Parameter(torch.zeros(shape))
            self.weight_g = nn.Parameter(torch.ones(out_ch))
        else:
            self.weight = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    @torch.no_grad()
    def reset(self, generator: torch.Generator, scale: float = 1.0) -> None:
        v = he_normal((self.out_ch, self.in_ch, self.kernel, self.kernel), self.fan_in, generator) * scale
        if self.weight_norm:
            self.weight_v.copy_(v)
            self.weight_g.copy_(v.reshape(self.out_ch, -1).norm(dim=1))
        else:
            self.weight.copy_(v)
        self.bias.zero_()

    def effective_weight(self) -> Tensor:
        if self.weight_norm:
            return weight_norm(self.weight_v, self.weight_g)
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.effective_weight(), self.bias, self.stride, self.pad)


class Dense(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))

    @torch.no_grad()
    def reset(self, generator: torch.Generator, scale: float = 1.0) -> None:
        self.weight.copy_(he_normal(self.weight.shape, self.weight.shape[1], generator) * scale)
        self.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class Adam:
    """Adam with bias correction over a fixed set of named parameters.

    ``step`` zeroes the gradients it consumed. A non-finite gradient raises
    :class:`TrainingError` naming the offending parameter, before any
    parameter is touched.
    """

    def __init__(self, named_params: Iterable[tuple[str, nn.Parameter]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for _, p in self.params]
        self.v = [torch.zeros_like(p) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, self.t)


@torch.no_grad()
def adam_step(params: Sequence[tuple[str, nn.Parameter]], m: Sequence[Tensor], v: Sequence[Tensor],
              lr: float, beta1: float, beta2: float, eps: float, t: int) -> None:
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for (_, p), m_i, v_i in zip(params, m, v):
        if p.grad is None:
            continue
        g = p.grad
        m_i.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v_i.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m_i / c1) / (torch.sqrt(v_i / c2) + eps))
        g.zero_()
