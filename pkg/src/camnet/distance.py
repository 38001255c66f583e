"""Perceptual distance: fixed random deep features plus a small pixel L1 term.

The feature network never trains. Its weights are drawn from a fixed seed,
so every process computes the same distance. Swap in another backend by
name via :func:`get_distance`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .errors import ShapeError
from .numerics import Conv2d, leaky_relu
from .pyramid import ImagePyramid

FEATURE_SEED = 7
FEATURE_CHANNELS = (8, 16, 32)
PIXEL_WEIGHT = 0.1
NORM_EPS = 1e-10


class FeatureNet(nn.Module):
    """Three stride-2 3x3 conv stages (8 -> 16 -> 32 channels) with leaky ReLU."""

    def __init__(self, seed: int = FEATURE_SEED, in_ch: int = 3, slope: float = 0.2):
        super().__init__()
        self.in_ch = in_ch
        self.slope = slope
        gen = torch.Generator().manual_seed(seed)
        chans = (in_ch,) + FEATURE_CHANNELS
        self.stages = nn.ModuleList()
        for cin, cout in zip(chans, chans[1:]):
            conv = Conv2d(cin, cout, 3, stride=2, pad=1, weight_norm=False)
            conv.reset(gen)
            self.stages.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        if x.shape[1] == 1 and self.in_ch == 3:
            x = x.expand(-1, 3, -1, -1)
        feats = []
        for conv in self.stages:
            x = leaky_relu(conv(x), self.slope)
            feats.append(x)
        return feats

    def pooled(self, x: Tensor) -> Tensor:
        """Global-average-pooled final-stage features, shape (N, 32)."""
        return self.forward(x)[-1].mean(dim=(2, 3))


_feature_net: FeatureNet | None = None


def feature_net() -> FeatureNet:
    global _feature_net
    if _feature_net is None:
        _feature_net = FeatureNet()
    return _feature_net


def _unit(f: Tensor) -> Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + NORM_EPS)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"distance between mismatched shapes {tuple(a.shape)} and {tuple(b.shape)}")
    if a.dim() != 4:
        raise ShapeError(f"distance expects (N, C, H, W) batches, got {tuple(a.shape)}")


def proxy_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-item perceptual distance of two batches, shape (N,)."""
    _check_pair(a, b)
    net = feature_net()
    d = PIXEL_WEIGHT * (a - b).abs().mean(dim=(1, 2, 3))
    for fa, fb in zip(net(a), net(b)):
        diff = _unit(fa) - _unit(fb)
        d = d + (diff * diff).sum(dim=1).mean(dim=(1, 2))
    return d


def pixel_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b)
    return ((a - b) ** 2).mean(dim=(1, 2, 3))


BACKENDS: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "proxy": proxy_distance,
    "pixel_l2": pixel_l2_distance,
}


def get_distance(backend: str = "proxy") -> Callable[[Tensor, Tensor], Tensor]:
    try:
        return BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown distance backend {backend!r}; choose from {sorted(BACKENDS)}") from None


def _as_batch(t: Tensor) -> Tensor:
    return t.unsqueeze(0) if t.dim() == 3 else t


def perceptual_distance(a: Tensor, b: Tensor, backend: str = "proxy") -> float:
    """Scalar distance between two single images (C, H, W) or (1, C, H, W)."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[0] != 1 or b.shape[0] != 1:
        raise ShapeError("perceptual_distance compares single images; use batch_distance for batches")
    with torch.no_grad():
        return float(get_distance(backend)(a, b)[0])


def batch_distance(a: Tensor, b: Tensor, backend: str = "proxy") -> Tensor:
    return get_distance(backend)(a, b)


def multiscale_distance(outputs: Sequence[Tensor], targets: ImagePyramid, backend: str = "proxy") -> Tensor:
    """Per-item sum over scales of the distance between each output and its target level."""
    if len(outputs) != len(targets):
        raise ShapeError(f"{len(outputs)} outputs but {len(targets)} target levels")
    dist = get_distance(backend)
    return sum(dist(o, t) for o, t in zip(outputs, targets.levels))


def per_scale_distances(outputs: Sequence[Tensor], targets: ImagePyramid, backend: str = "proxy") -> list[Tensor]:
    if len(outputs) != len(targets):
        raise ShapeError(f"{len(outputs)} outputs but {len(targets)} target levels")
    dist = get_distance(backend)
    return [dist(o, t) for o, t in zip(outputs, targets.levels)]


@torch.no_grad()
def selection_distance(output_k: Tensor, target_k: Tensor, backend: str = "proxy") -> Tensor:
    """Ranking distance at one scale; no graph is built."""
    return get_distance(backend)(output_k, target_k)
