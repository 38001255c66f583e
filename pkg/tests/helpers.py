"""Small models and data shared by the test modules."""
import numpy as np
import torch

from camnet.generator import CascadeConfig, LatentCode, LatentPyramid
from camnet.numerics import box_down2, conv2d, dense, leaky_relu, nearest_up2, weight_norm
from camnet.pyramid import build_pyramid

TINY = CascadeConfig(K=2, base_res=4, feat_ch=4, rrdb_per_module=2, dense_blocks_per_rrdb=2,
                     convs_per_dense_block=3, growth_ch=3, latent_spatial_ch=2, latent_global_dim=5,
                     mapping_layers=2, out_ch=3, in_ch=1)

# the small architecture used for the shapes experiments
SMALL = dict(feat_ch=16, rrdb_per_module=1, dense_blocks_per_rrdb=1, convs_per_dense_block=3, growth_ch=8,
             latent_global_dim=16, mapping_layers=2, latent_spatial_ch=4)


def random_latents(cfg, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentPyramid([
        LatentCode(torch.randn(batch, cfg.latent_spatial_ch, r, r, generator=g),
                   torch.randn(batch, cfg.latent_global_dim, generator=g))
        for r in cfg.resolutions
    ])


def random_inputs(cfg, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed + 1000)
    return build_pyramid(torch.rand(batch, cfg.in_ch, cfg.resolutions[-1], cfg.resolutions[-1], generator=g), cfg.K)


def random_targets(cfg, batch=1, seed=0):
    g = torch.Generator().manual_seed(seed + 2000)
    return build_pyramid(torch.rand(batch, cfg.out_ch, cfg.resolutions[-1], cfg.resolutions[-1], generator=g), cfg.K)


def reference_code(cfg, k, seed, stream, epoch, item, cand):
    """Latent for one key, drawn without going through the library's sampler."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, epoch, item, k, cand]))
    r = cfg.resolution(k)
    spatial = rng.standard_normal((cfg.latent_spatial_ch, r, r), dtype=np.float32)
    glob = rng.standard_normal(cfg.latent_global_dim, dtype=np.float32)
    return LatentCode(torch.from_numpy(spatial)[None], torch.from_numpy(glob)[None])


# -- gradient-check cases ---------------------------------------------------

def _probe(shape, g):
    return torch.randn(shape, generator=g, dtype=torch.float64)


def grad_case(op, seed):
    """(scalar function, inputs) for one differentiable op and seed."""
    g = torch.Generator().manual_seed(seed)
    if op == "conv2d":
        x, w, b = _probe((1, 2, 4, 4), g), _probe((3, 2, 3, 3), g), _probe((3,), g)
        stride, pad = [(1, 1), (2, 1), (1, 0)][seed % 3]
        r = _probe(conv2d(x, w, b, stride, pad).shape, g)
        return (lambda x, w, b: (conv2d(x, w, b, stride, pad) * r).sum()), [x, w, b]
    if op == "conv2d_wn":
        x, v, gain, b = _probe((1, 2, 4, 4), g), _probe((2, 2, 3, 3), g), _probe((2,), g).abs() + 0.5, _probe((2,), g)
        r = _probe((1, 2, 4, 4), g)
        return (lambda x, v, gain, b: (conv2d(x, weight_norm(v, gain), b, 1, 1) * r).sum()), [x, v, gain, b]
    if op == "dense":
        x, w, b = _probe((3, 4), g), _probe((5, 4), g), _probe((5,), g)
        r = _probe((3, 5), g)
        return (lambda x, w, b: (dense(x, w, b) * r).sum()), [x, w, b]
    if op == "leaky_relu":
        x = _probe((12,), g)
        x = x + 0.05 * torch.sign(x)  # keep probes away from the kink
        r = _probe((12,), g)
        return (lambda x: (leaky_relu(x, 0.2) * r).sum()), [x]
    if op == "nearest_up2":
        x, r = _probe((1, 2, 3, 3), g), _probe((1, 2, 6, 6), g)
        return (lambda x: (nearest_up2(x) * r).sum()), [x]
    if op == "box_down2":
        x, r = _probe((1, 2, 4, 6), g), _probe((1, 2, 2, 3), g)
        return (lambda x: (box_down2(x) * r).sum()), [x]
    raise KeyError(op)


DIFFERENTIABLE_OPS = ["conv2d", "conv2d_wn", "dense", "leaky_relu", "nearest_up2", "box_down2"]
