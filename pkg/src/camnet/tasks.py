"""Synthetic data and task adapters.

The colourisation dataset draws one anti-aliased shape per image on a grey
background, coloured uniformly at random from a palette of three colours
that share one luminance. The grayscale input is therefore identical for
all three colourings, and the conditional distribution has exactly three
modes per shape kind.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import ConfigError, ShapeError
from .numerics import bicubic_to

LUMA = np.array([0.299, 0.587, 0.114])
SHAPE_KINDS = ("circle", "square", "triangle")
BACKGROUND = 0.5
SUPERSAMPLE = 4

# Standard JPEG luminance quantisation table (row-major, not zig-zag).
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Luma of an array whose last axis (or axis 0 for CHW) is RGB."""
    rgb = np.asarray(rgb)
    if rgb.shape[-1] == 3:
        return rgb @ LUMA
    return np.tensordot(LUMA, rgb, axes=(0, 0))


def isoluminant_palette(lum: float, hue_offset: float, n: int = 3, margin: float = 0.03) -> np.ndarray:
    """``n`` colours of luminance ``lum`` at evenly spaced hues, as saturated as [0, 1] allows."""
    u = np.array([LUMA[1], -LUMA[0], 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(LUMA, u)
    v /= np.linalg.norm(v)
    angles = hue_offset + 2 * np.pi * np.arange(n) / n
    dirs = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
    # largest common chroma keeping every channel inside [margin, 1 - margin]
    with np.errstate(divide="ignore"):
        up = np.where(dirs > 0, (1 - margin - lum) / dirs, np.inf)
        down = np.where(dirs < 0, (margin - lum) / dirs, np.inf)
    t = min(up.min(), down.min())
    return lum + t * dirs


DEFAULT_PALETTES = {
    "circle": isoluminant_palette(0.30, 0.0),
    "square": isoluminant_palette(0.70, 0.6),
    "triangle": isoluminant_palette(0.40, 1.2),
}


@dataclass
class ShapesSpec:
    image_size: int = 32
    shapes_per_image: int = 1
    kinds: tuple[str, ...] = SHAPE_KINDS
    background: float = BACKGROUND
    size: int = 3000
    seed: int = 0
    palettes: dict[str, list[list[float]]] = field(
        default_factory=lambda: {k: v.tolist() for k, v in DEFAULT_PALETTES.items()})

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if self.shapes_per_image != 1:
            raise ConfigError("only one shape per image is supported")
        for kind in self.kinds:
            if kind not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {kind!r}")
            lums = luminance(np.asarray(self.palettes[kind]))
            if np.ptp(lums) > 1e-3:
                raise ConfigError(f"palette for {kind} is not iso-luminant: {lums}")

    def palette(self, kind: str) -> np.ndarray:
        return np.asarray(self.palettes[kind], dtype=np.float64)


@dataclass
class ShapesDataset:
    spec: ShapesSpec
    images: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    masks: np.ndarray           # (N, 1, H, W) float32, 1 inside the shape
    palette_index: np.ndarray   # (N,)
    kind_index: np.ndarray      # (N,)

    def __len__(self) -> int:
        return len(self.images)

    def palette_for(self, i: int) -> np.ndarray:
        return self.spec.palette(self.spec.kinds[self.kind_index[i]])


def _coverage(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Fraction of each pixel inside the shape, by supersampling."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(coords, coords)
    if kind == "circle":
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= r ** 2
    elif kind == "square":
        inside = (np.abs(x - cx) <= r * 0.85) & (np.abs(y - cy) <= r * 0.85)
    else:
        # upward triangle with apex at (cx, cy - r), base at y = cy + r/2
        top, base = cy - r, cy + 0.5 * r
        half = (y - top) / (base - top) * r * np.sqrt(3) / 2 * 1.15
        inside = (y >= top) & (y <= base) & (np.abs(x - cx) <= half)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render_shape(spec: ShapesSpec, kind: str, colour: np.ndarray, cx: float, cy: float, r: float):
    cov = _coverage(kind, spec.image_size, cx, cy, r)
    img = cov[None] * np.asarray(colour)[:, None, None] + (1 - cov[None]) * spec.background
    return img.astype(np.float32), (cov >= 0.5).astype(np.float32)[None]


def _geometry(spec: ShapesSpec, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    s = spec.image_size
    kind_i = int(rng.integers(len(spec.kinds)))
    colour_i = int(rng.integers(3))
    r = rng.uniform(0.22, 0.38) * s
    margin = s / 32  # keeps a one-pixel border at 32px
    cx = rng.uniform(r + margin, s - r - margin)
    cy = rng.uniform(r + margin, s - r - margin)
    return kind_i, colour_i, cx, cy, r


def shape_item(spec: ShapesSpec, index: int, colour_override: int | None = None):
    """(image, mask, palette index, kind index) for one dataset index."""
    kind_i, colour_i, cx, cy, r = _geometry(spec, index)
    if colour_override is not None:
        colour_i = colour_override
    kind = spec.kinds[kind_i]
    img, mask = render_shape(spec, kind, spec.palette(kind)[colour_i], cx, cy, r)
    return img, mask, colour_i, kind_i


def gen_shapes(spec: ShapesSpec, start: int = 0) -> ShapesDataset:
    items = [shape_item(spec, i) for i in range(start, start + spec.size)]
    return ShapesDataset(
        spec=spec,
        images=np.stack([it[0] for it in items]),
        masks=np.stack([it[1] for it in items]),
        palette_index=np.array([it[2] for it in items]),
        kind_index=np.array([it[3] for it in items]),
    )


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "colourization"
    factor: int = 8
    quality: int = 1
    codec_bits: int = 12

    def __post_init__(self):
        if self.kind not in ("super_resolution", "colourization", "decompression"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ConfigError(f"super-resolution factor must be a power of 2, got {self.factor}")
        if not 1 <= self.quality <= 100:
            raise ConfigError(f"quality must lie in [1, 100], got {self.quality}")
        if self.codec_bits not in (8, 12):
            raise ConfigError(f"codec_bits must be 8 or 12, got {self.codec_bits}")

    @property
    def in_ch(self) -> int:
        return 1 if self.kind == "colourization" else 3


def to_gray(img: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) -> (..., 1, H, W) luma."""
    return np.tensordot(img, LUMA.astype(img.dtype), axes=([-3], [0]))[..., None, :, :].astype(img.dtype)


def make_pair(task: TaskSpec, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Conditioning input for ``target`` (3, H, W) or a batch (N, 3, H, W)."""
    single = target.ndim == 3
    batch = target[None] if single else target
    if task.kind == "colourization":
        inp = to_gray(batch)
    elif task.kind == "super_resolution":
        h, w = batch.shape[-2:]
        if h % task.factor or w % task.factor:
            raise ShapeError(f"{h}x{w} target not divisible by factor {task.factor}")
        inp = bicubic_to(torch.from_numpy(np.ascontiguousarray(batch)), h // task.factor, w // task.factor).numpy()
        inp = np.clip(inp, 0.0, 1.0)
    else:
        inp = np.stack([dct_codec(t, task.quality, task.codec_bits) for t in batch])
    inp = inp.astype(np.float32)
    return (inp[0] if single else inp), target


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal type-II DCT matrix: ``coeffs = D @ block @ D.T``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT8 = dct_matrix(8)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quant_divisors(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ConfigError(f"quality must lie in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(JPEG_LUMA_TABLE * s / 100.0, 1.0)


def blockwise_dct(channel: np.ndarray, inverse: bool = False) -> np.ndarray:
    h, w = channel.shape
    blocks = channel.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    if inverse:
        out = np.einsum("ki,abkl,lj->abij", _DCT8, blocks, _DCT8)
    else:
        out = np.einsum("ik,abkl,jl->abij", _DCT8, blocks, _DCT8)
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def dct_codec(image: np.ndarray, quality: int, bits: int = 12) -> np.ndarray:
    """Lossy 8x8 block-DCT round trip of a (C, H, W) image in [0, 1].

    Each channel is coded independently at ``bits`` sample precision
    (0..2^bits-1 with a 2^(bits-1) level shift), quantised with the JPEG
    luminance table scaled by quality. At 12 bits the worst-case rounding
    error at quality 100 stays below 0.25/255; 8 bits gives baseline JPEG
    precision, where it can reach about 3.5/255.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] % 8 or image.shape[2] % 8:
        raise ShapeError(f"dct_codec needs (C, H, W) with H, W divisible by 8, got {image.shape}")
    if bits not in (8, 12):
        raise ConfigError(f"sample precision must be 8 or 12 bits, got {bits}")
    peak, shift = 2.0 ** bits - 1.0, 2.0 ** (bits - 1)
    div = quant_divisors(quality)
    h, w = image.shape[1:]
    tiled = np.tile(div, (h // 8, w // 8))
    out = np.empty_like(image)
    for c, chan in enumerate(image):
        coeffs = blockwise_dct(chan * peak - shift)
        coeffs = round_half_away(coeffs / tiled) * tiled
        out[c] = (blockwise_dct(coeffs, inverse=True) + shift) / peak
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- on-disk dataset ------------------------------------------------------

def _to_png(arr: np.ndarray, path: Path) -> None:
    a = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if a.shape[0] == 1:
        Image.fromarray(a[0], mode="L").save(path)
    else:
        Image.fromarray(a.transpose(1, 2, 0), mode="RGB").save(path)


def _from_png(path: Path) -> np.ndarray:
    a = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def save_dataset(ds: ShapesDataset, root: str | Path, split: str = "train") -> Path:
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(len(ds)):
        img_name, mask_name = f"{split}/{i:05d}.png", f"{split}/{i:05d}_mask.png"
        _to_png(ds.images[i], root / img_name)
        _to_png(ds.masks[i], root / mask_name)
        items.append({"image": img_name, "mask": mask_name,
                      "palette_index": int(ds.palette_index[i]), "kind_index": int(ds.kind_index[i])})
    manifest = {"spec": asdict(ds.spec), "items": items}
    path = root / f"manifest_{split}.json" if split != "train" else root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(root: str | Path, split: str = "train") -> ShapesDataset:
    root = Path(root)
    path = root / ("manifest.json" if split == "train" else f"manifest_{split}.json")
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    items = manifest["items"]
    return ShapesDataset(
        spec=ShapesSpec(**manifest["spec"]),
        images=np.stack([_from_png(root / it["image"]) for it in items]),
        masks=np.stack([_from_png(root / it["mask"]) for it in items]),
        palette_index=np.array([it["palette_index"] for it in items]),
        kind_index=np.array([it["kind_index"] for it in items]),
    )


def as_tensor(a: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
