"""The cascaded generator: K modules at doubling resolutions.

Each module fuses (conditioning image, spatial latent, upsampled previous
output), runs a stack of residual-in-residual dense blocks whose outputs are
modulated channel-wise by a mapping network fed with the global latent, and
projects back to image channels.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .numerics import Conv2d, Dense, leaky_relu, nearest_up2
from .pyramid import ImagePyramid

CHECKPOINT_MAGIC = b"CAMN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CascadeConfig:
    K: int = 4
    base_res: int = 4
    feat_ch: int = 32
    rrdb_per_module: int = 2
    dense_blocks_per_rrdb: int = 3
    convs_per_dense_block: int = 5
    growth_ch: int = 16
    latent_spatial_ch: int = 8
    latent_global_dim: int = 64
    mapping_layers: int = 4
    beta: float = 0.2
    leaky_slope: float = 0.2
    weight_norm: bool = True
    mapping_enabled: bool = True
    out_ch: int = 3
    in_ch: int = 1

    def __post_init__(self):
        counts = ("K", "base_res", "feat_ch", "rrdb_per_module", "dense_blocks_per_rrdb",
                  "convs_per_dense_block", "growth_ch", "latent_spatial_ch", "latent_global_dim",
                  "mapping_layers", "out_ch", "in_ch")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"cascade.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"cascade.beta must lie in (0, 1], got {self.beta}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError(f"cascade.leaky_slope must lie in [0, 1), got {self.leaky_slope}")

    def resolution(self, k: int) -> int:
        return self.base_res * 2 ** k

    @property
    def resolutions(self) -> list[int]:
        return [self.resolution(k) for k in range(self.K)]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CascadeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cascade keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentCode:
    """Latent for one module: spatial noise (N, C, r, r) and global vector (N, D)."""

    spatial: Tensor
    global_: Tensor

    def select(self, index) -> "LatentCode":
        return LatentCode(self.spatial[index], self.global_[index])


@dataclass
class LatentPyramid:
    codes: list[LatentCode]

    def __len__(self) -> int:
        return len(self.codes)

    def select(self, index) -> "LatentPyramid":
        return LatentPyramid([c.select(index) for c in self.codes])

    @staticmethod
    def cat(pyramids: list["LatentPyramid"]) -> "LatentPyramid":
        K = len(pyramids[0])
        return LatentPyramid([
            LatentCode(torch.cat([p.codes[k].spatial for p in pyramids]),
                       torch.cat([p.codes[k].global_ for p in pyramids]))
            for k in range(K)
        ])


class DenseBlock(nn.Module):
    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        self.slope = cfg.leaky_slope
        n = cfg.convs_per_dense_block
        self.convs = nn.ModuleList()
        for i in range(n):
            out = cfg.feat_ch if i == n - 1 else cfg.growth_ch
            self.convs.append(Conv2d(cfg.feat_ch + cfg.growth_ch * i, out, 3, weight_norm=cfg.weight_norm))

    def forward(self, x: Tensor) -> Tensor:
        acts = [x]
        for i, conv in enumerate(self.convs):
            h = conv(torch.cat(acts, 1) if len(acts) > 1 else x)
            if i < len(self.convs) - 1:
                h = leaky_relu(h, self.slope)
            acts.append(h)
        return acts[-1]


class RRDB(nn.Module):
    """Chain ``b <- b + beta * DB(b)`` over the dense blocks, starting from the input."""

    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        self.beta = cfg.beta
        self.feat_ch = cfg.feat_ch
        self.blocks = nn.ModuleList(DenseBlock(cfg) for _ in range(cfg.dense_blocks_per_rrdb))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.feat_ch:
            raise ShapeError(f"RRDB expects {self.feat_ch} channels, got {x.shape[1]}")
        b = x
        for block in self.blocks:
            b = b + self.beta * block(b)
        return b


def rrdb_forward(rrdb: RRDB, x: Tensor, gamma: Tensor | None = None, delta: Tensor | None = None) -> Tensor:
    """RRDB followed by the channel-wise modulation ``gamma * out + delta``.

    ``gamma`` and ``delta`` are (N, C) or (C,); ``None`` means identity.
    """
    out = rrdb(x)
    if gamma is not None:
        out = out * gamma.reshape(-1, out.shape[1], 1, 1) if gamma.dim() == 2 else out * gamma.reshape(1, -1, 1, 1)
    if delta is not None:
        out = out + (delta.reshape(-1, out.shape[1], 1, 1) if delta.dim() == 2 else delta.reshape(1, -1, 1, 1))
    return out


class MappingNetwork(nn.Module):
    """Dense stack from the global latent to per-RRDB (gamma, delta)."""

    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.n_rrdb = cfg.rrdb_per_module
        self.feat_ch = cfg.feat_ch
        d = cfg.latent_global_dim
        self.layers = nn.ModuleList(Dense(d, d) for _ in range(cfg.mapping_layers - 1))
        self.layers.append(Dense(d, 2 * cfg.feat_ch * cfg.rrdb_per_module))

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Returns gamma, delta of shape (N, n_rrdb, feat_ch)."""
        h = z
        for layer in self.layers[:-1]:
            h = leaky_relu(layer(h), self.slope)
        out = self.layers[-1](h).reshape(-1, self.n_rrdb, 2, self.feat_ch)
        return out[:, :, 0], out[:, :, 1]


class CascadeModule(nn.Module):
    def __init__(self, cfg: CascadeConfig, k: int):
        super().__init__()
        self.k = k
        self.res = cfg.resolution(k)
        self.beta = cfg.beta
        self.cfg = cfg
        fuse_in = cfg.in_ch + cfg.latent_spatial_ch + (cfg.out_ch if k > 0 else 0)
        self.fuse = Conv2d(fuse_in, cfg.feat_ch, 3, weight_norm=cfg.weight_norm)
        self.rrdbs = nn.ModuleList(RRDB(cfg) for _ in range(cfg.rrdb_per_module))
        self.out = Conv2d(cfg.feat_ch, cfg.out_ch, 3, weight_norm=cfg.weight_norm)
        self.mapping = MappingNetwork(cfg) if cfg.mapping_enabled else None

    def modulation(self, z_global: Tensor) -> tuple[Tensor, Tensor] | None:
        if self.mapping is None:
            return None
        return self.mapping(z_global)

    def forward(self, cond: Tensor, prev: Tensor | None, code: LatentCode) -> Tensor:
        r = self.res
        if cond.dim() != 4 or tuple(cond.shape[-2:]) != (r, r):
            raise ShapeError(f"module {self.k}: conditioning input must be {r}x{r}, got {tuple(cond.shape)}")
        if tuple(code.spatial.shape[-2:]) != (r, r):
            raise ShapeError(f"module {self.k}: latent must be {r}x{r}, got {tuple(code.spatial.shape)}")
        # latents are drawn in float32; follow the conditioning precision
        parts = [cond, code.spatial.to(cond.dtype)]
        if self.k > 0:
            if prev is None or tuple(prev.shape[-2:]) != (r // 2, r // 2):
                got = None if prev is None else tuple(prev.shape)
                raise ShapeError(f"module {self.k}: previous output must be {r // 2}x{r // 2}, got {got}")
            parts.append(nearest_up2(prev))
        feats = self.fuse(torch.cat(parts, 1))
        mod = self.modulation(code.global_.to(cond.dtype))
        h = feats
        for i, rrdb in enumerate(self.rrdbs):
            if mod is None:
                h = rrdb_forward(rrdb, h)
            else:
                h = rrdb_forward(rrdb, h, mod[0][:, i], mod[1][:, i])
        return self.out(feats + self.beta * h)


class CamNet(nn.Module):
    """All trainable weights of the cascade."""

    def __init__(self, cfg: CascadeConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList(CascadeModule(cfg, k) for k in range(cfg.K))

    def module_forward(self, k: int, cond: Tensor, prev: Tensor | None, code: LatentCode) -> Tensor:
        return self.stages[k](cond, prev, code)

    def cascade_forward(self, input_pyr: ImagePyramid, latents: LatentPyramid, up_to: int | None = None) -> list[Tensor]:
        up_to = self.cfg.K if up_to is None else up_to
        if not 1 <= up_to <= self.cfg.K:
            raise ShapeError(f"up_to must lie in [1, {self.cfg.K}], got {up_to}")
        if len(input_pyr) < up_to or len(latents) < up_to:
            raise ShapeError(f"need {up_to} pyramid levels and latents, got {len(input_pyr)} and {len(latents)}")
        outs: list[Tensor] = []
        prev = None
        for k in range(up_to):
            prev = self.module_forward(k, input_pyr.levels[k], prev, latents.codes[k])
            outs.append(prev)
        return outs

    forward = cascade_forward

    def named_parameters_sorted(self) -> list[tuple[str, nn.Parameter]]:
        return sorted(self.named_parameters(), key=lambda kv: kv[0])

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_weights(cfg: CascadeConfig, seed: int) -> CamNet:
    """Deterministic He initialisation.

    The last conv of every dense block and every module output conv are
    scaled by 0.1; the mapping head starts at gamma=1, delta=0 for a zero
    global latent.
    """
    net = CamNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    # separate stream so toggling the mapping networks leaves conv weights unchanged
    map_gen = torch.Generator().manual_seed(int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0]))
    for stage in net.stages:
        stage.fuse.reset(gen)
        for rrdb in stage.rrdbs:
            for block in rrdb.blocks:
                for i, conv in enumerate(block.convs):
                    conv.reset(gen, 0.1 if i == len(block.convs) - 1 else 1.0)
        stage.out.reset(gen, 0.1)
        if stage.mapping is not None:
            for layer in stage.mapping.layers:
                layer.reset(map_gen)
            with torch.no_grad():
                head = stage.mapping.layers[-1].bias.view(cfg.rrdb_per_module, 2, cfg.feat_ch)
                head[:, 0] = 1.0
                head[:, 1] = 0.0
    return net


def parameter_census(cfg: CascadeConfig) -> int:
    """Closed-form parameter count of :class:`CamNet` for ``cfg``."""

    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout + (cout if cfg.weight_norm else 0)

    dense_block = sum(
        conv(cfg.feat_ch + cfg.growth_ch * i, cfg.feat_ch if i == cfg.convs_per_dense_block - 1 else cfg.growth_ch)
        for i in range(cfg.convs_per_dense_block)
    )
    rrdb = cfg.dense_blocks_per_rrdb * dense_block
    d = cfg.latent_global_dim
    mapping = (cfg.mapping_layers - 1) * (d * d + d) + 2 * cfg.feat_ch * cfg.rrdb_per_module * (d + 1)
    total = 0
    for k in range(cfg.K):
        fuse_in = cfg.in_ch + cfg.latent_spatial_ch + (cfg.out_ch if k > 0 else 0)
        total += conv(fuse_in, cfg.feat_ch) + cfg.rrdb_per_module * rrdb + conv(cfg.feat_ch, cfg.out_ch)
        if cfg.mapping_enabled:
            total += mapping
    return total


def save_checkpoint(path: str | Path, net: CamNet, seed: int, step: int, extra: dict | None = None) -> None:
    """Write ``CAMN`` magic, u32 version, u32 header length, JSON header, then float32 blobs.

    Blobs follow lexicographic parameter-name order; names and shapes are
    listed in the header so a reader can split them.
    """
    params = net.named_parameters_sorted()
    header = {
        "cascade": asdict(net.cfg),
        "seed": int(seed),
        "step": int(step),
        "params": [[name, list(p.shape)] for name, p in params],
    }
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, p in params:
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())
    tmp.replace(path)


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"not a checkpoint (magic {magic!r})")
    version, length = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[CamNet, dict]:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        net = CamNet(CascadeConfig(**header["cascade"]))
        own = dict(net.named_parameters())
        expected = [[n, list(p.shape)] for n, p in net.named_parameters_sorted()]
        if header["params"] != expected:
            raise ConfigError("checkpoint parameter layout does not match its cascade config")
        with torch.no_grad():
            for name, shape in header["params"]:
                n = int(np.prod(shape)) if shape else 1
                blob = np.frombuffer(fh.read(4 * n), dtype="<f4")
                if blob.size != n:
                    raise ConfigError(f"checkpoint truncated at {name}")
                own[name].copy_(torch.from_numpy(blob.reshape(shape).copy()))
    return net, header
