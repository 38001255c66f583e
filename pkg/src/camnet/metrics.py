"""Evaluation: Frechet distance, faithfulness-weighted variance, sampling
efficiency of hierarchical selection, and palette mode coverage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .distance import FeatureNet, feature_net, get_distance
from .errors import ContractError, InsufficientSamplesError, ShapeError
from .generator import CamNet
from .imle import STREAM_BENCH, _repeat, hierarchical_select, sample_latents
from .pyramid import ImagePyramid

DEFAULT_SIGMAS = (0.3, 0.2, 0.15)


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def _stack(images: Sequence[Tensor] | Tensor) -> Tensor:
    if isinstance(images, Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return torch.stack([im if im.dim() == 3 else im[0] for im in images])


@torch.no_grad()
def pooled_features(images: Sequence[Tensor] | Tensor, extractor: FeatureNet | None = None,
                    chunk: int = 256) -> np.ndarray:
    extractor = extractor or feature_net()
    batch = _stack(images).clamp(0.0, 1.0)
    parts = [extractor.pooled(batch[i:i + chunk]) for i in range(0, len(batch), chunk)]
    return torch.cat(parts).double().numpy()


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 samples for a covariance, got {feats.shape[0]}")
    mu = feats.mean(axis=0)
    centred = feats - mu
    sigma = centred.T @ centred / (feats.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2, feats.shape[0])


def feature_stats(images: Sequence[Tensor] | Tensor, extractor: FeatureNet | None = None) -> FeatureStats:
    n = len(images)
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 images, got {n}")
    return stats_from_features(pooled_features(images, extractor))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(p: FeatureStats, q: FeatureStats) -> float:
    """``|mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2)``, clamped at 0."""
    if p.mu.shape != q.mu.shape or p.sigma.shape != q.sigma.shape:
        raise ShapeError(f"feature dims differ: {p.mu.shape} vs {q.mu.shape}")
    root_p = _sqrt_psd(p.sigma)
    cross = _sqrt_psd(root_p @ q.sigma @ root_p)
    diff = p.mu - q.mu
    value = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid(generated: Sequence[Tensor] | Tensor, reference: Sequence[Tensor] | Tensor,
        extractor: FeatureNet | None = None) -> float:
    return frechet_distance(feature_stats(generated, extractor), feature_stats(reference, extractor))


@dataclass
class FwvConfig:
    sigma_list: list[float] = field(default_factory=lambda: list(DEFAULT_SIGMAS))
    samples_per_input: int = 16

    def __post_init__(self):
        if not self.sigma_list or min(self.sigma_list) <= 0:
            raise ValueError(f"bandwidths must be positive, got {self.sigma_list}")
        if self.samples_per_input < 2:
            raise ValueError("faithfulness-weighted variance needs at least 2 samples per input")


@torch.no_grad()
def faithfulness_weighted_variance(samples: Sequence[Tensor] | Tensor, target: Tensor, cfg: FwvConfig | None = None,
                                   backend: str = "proxy") -> dict[float, float]:
    """Kernel-weighted spread of samples around their mean, per bandwidth.

    ``FWV(s) = 1/m * sum_j exp(-d(y_j, target)^2 / (2 s^2)) * d(y_j, mean)^2``
    """
    cfg = cfg or FwvConfig()
    batch = _stack(samples).clamp(0.0, 1.0)
    m = batch.shape[0]
    if m < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {m}")
    target = _stack(target).clamp(0.0, 1.0)
    if target.shape[1:] != batch.shape[1:]:
        raise ShapeError(f"sample shape {tuple(batch.shape[1:])} != target shape {tuple(target.shape[1:])}")
    dist = get_distance(backend)
    to_target = dist(batch, target.expand_as(batch)).double().numpy()
    # float64 accumulation keeps the mean of identical samples exact
    mean = batch.double().mean(dim=0, keepdim=True).to(batch.dtype)
    to_mean = dist(batch, mean.expand_as(batch)).double().numpy()
    return {float(s): float(np.mean(np.exp(-to_target ** 2 / (2 * s * s)) * to_mean ** 2))
            for s in cfg.sigma_list}


def mode_coverage(samples: Sequence[Tensor] | Tensor, palette: np.ndarray, region_mask: Tensor | np.ndarray) -> float:
    """Fraction of palette entries that some sample's masked mean colour is nearest to."""
    palette = np.asarray(palette, dtype=np.float64)
    if palette.size == 0:
        raise ContractError("palette is empty")
    mask = torch.as_tensor(np.asarray(region_mask), dtype=torch.float32).reshape(-1)
    if float(mask.sum()) <= 0:
        raise ContractError("region mask is empty")
    batch = _stack(samples).clamp(0.0, 1.0)
    flat = batch.reshape(batch.shape[0], batch.shape[1], -1)
    if flat.shape[-1] != mask.numel():
        raise ShapeError(f"mask has {mask.numel()} pixels, samples have {flat.shape[-1]}")
    means = ((flat * mask).sum(-1) / mask.sum()).double().numpy()
    nearest = np.argmin(((means[:, None, :] - palette[None]) ** 2).sum(-1), axis=1)
    return len(set(nearest.tolist())) / len(palette)


# -- hierarchical vs. vanilla sampling efficiency -----------------------------

@dataclass
class BenchResult:
    m_per_stage: list[int]
    ratios: np.ndarray          # doubling-grid budget ratio per (input, trial)
    exact_ratios: np.ndarray    # first vanilla sample count reaching the HS distance / HS budget
    censored: np.ndarray        # bool, cap reached without matching

    @property
    def mean_ratio(self) -> float:
        return float(self.ratios.mean())

    @property
    def stderr(self) -> float:
        n = self.ratios.size
        return float(self.ratios.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def mean_exact_ratio(self) -> float:
        return float(self.exact_ratios.mean())

    @property
    def censored_count(self) -> int:
        return int(self.censored.sum())

    def curve(self, grid: Sequence[float] = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512)) -> list[tuple[float, float]]:
        """Fraction of runs matched by vanilla sampling within each normalised budget (HS = 1)."""
        return [(float(g), float(np.mean(self.exact_ratios <= g))) for g in grid]


@torch.no_grad()
def hs_efficiency_benchmark(net: CamNet, inputs: ImagePyramid, targets: ImagePyramid, m_per_stage: Sequence[int],
                            trials: int = 10, seed: int = 0, items: Sequence[int] | None = None,
                            cap_factor: int = 512, backend: str = "proxy", chunk: int = 256) -> BenchResult:
    """How many independent full-pyramid samples match hierarchical selection's distance.

    Per input and trial, hierarchical selection with budget ``B = sum(m)``
    reaches a finest-scale distance D. Vanilla samples are then drawn in
    order until the running minimum is <= D. The doubling-grid ratio is the
    smallest ``B * 2^i`` covering that count, divided by B.

    Both searches draw from the same keys (vanilla sample j uses candidate
    j at every stage), so with one module the two coincide and the ratio
    is exactly 1.
    """
    m_per_stage = [int(m) for m in m_per_stage]
    budget = sum(m_per_stage)
    cap = cap_factor * budget
    B = inputs.levels[0].shape[0]
    items = list(range(B)) if items is None else list(items)
    dist = get_distance(backend)
    ratios = np.zeros((B, trials))
    exact = np.zeros((B, trials))
    censored = np.zeros((B, trials), dtype=bool)
    for trial in range(trials):
        hs = hierarchical_select(net, inputs, targets, m_per_stage, items, trial, seed, STREAM_BENCH, backend)
        goal = hs.distances[:, -1]
        for b in range(B):
            one_in = ImagePyramid([t[b:b + 1] for t in inputs.levels])
            one_tgt = targets.levels[-1][b:b + 1]
            found = None
            drawn = 0
            while drawn < cap and found is None:
                n = min(chunk, cap - drawn)
                lat = sample_latents(net.cfg, seed, STREAM_BENCH, trial, [items[b]], range(drawn, drawn + n))
                out = net.cascade_forward(ImagePyramid([_repeat(t, n) for t in one_in.levels]), lat)[-1]
                d = dist(out, _repeat(one_tgt, n)).double().numpy()
                # tolerance absorbs float32 batch-size effects on identical samples
                hits = np.nonzero(d <= goal[b] + 1e-6)[0]
                if hits.size:
                    found = drawn + int(hits[0]) + 1
                drawn += n
            if found is None:
                censored[b, trial] = True
                exact[b, trial] = ratios[b, trial] = cap_factor
            else:
                exact[b, trial] = found / budget
                ratios[b, trial] = 2.0 ** max(0, math.ceil(math.log2(found / budget) - 1e-12))
    return BenchResult(m_per_stage, ratios.reshape(-1), exact.reshape(-1), censored.reshape(-1))
