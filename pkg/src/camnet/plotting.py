"""Figures and image grids written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# fixed metadata keeps repeated renders byte-stable
PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _to_hwc(img) -> np.ndarray:
    a = np.asarray(img.detach().cpu() if hasattr(img, "detach") else img, dtype=np.float32)
    if a.ndim == 4:
        a = a[0]
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    return np.clip(a, 0.0, 1.0).transpose(1, 2, 0)


def image_grid(rows: Sequence[Sequence], path: str | Path, scale: int = 2, pad: int = 2) -> Path:
    """Save rows of images (C, H, W in [0, 1]) as one PNG; images are upscaled to the largest size."""
    cells = [[_to_hwc(im) for im in row] for row in rows]
    size = max(c.shape[0] for row in cells for c in row)
    cell = size * scale
    n_cols = max(len(r) for r in cells)
    canvas = np.ones((len(cells) * (cell + pad) + pad, n_cols * (cell + pad) + pad, 3), dtype=np.float32)
    for i, row in enumerate(cells):
        for j, im in enumerate(row):
            f = cell // im.shape[0]
            up = im.repeat(f, axis=0).repeat(f, axis=1)
            y, x = pad + i * (cell + pad), pad + j * (cell + pad)
            canvas[y:y + cell, x:x + cell] = up
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(canvas * 255).astype(np.uint8)).save(path)
    return path


def plot_training(records: list[dict], path: str | Path) -> Path:
    steps = [r for r in records if r.get("kind") == "step"]
    rounds = [r for r in records if r.get("kind") == "selection"]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        if steps:
            x = [r["step"] for r in steps]
            ax1.plot(x, [r["loss"] for r in steps], lw=0.8, color="k", label="objective")
            per_scale = np.array([r["per_scale_losses"] for r in steps])
            for k in range(per_scale.shape[1]):
                ax1.plot(x, per_scale[:, k], lw=0.6, alpha=0.7, label=f"scale {k}")
            ax1.set_yscale("log")
            ax1.set_xlabel("optimizer step")
            ax1.set_ylabel("distance")
            ax1.legend(frameon=False)
        if rounds:
            d = np.array([r["mean_stage_distance"] for r in rounds])
            for k in range(d.shape[1]):
                ax2.plot([r["epoch"] for r in rounds], d[:, k], marker="o", ms=3, label=f"stage {k}")
            ax2.set_xlabel("epoch")
            ax2.set_ylabel("mean selected distance")
            ax2.legend(frameon=False)
        return _save(fig, path)


def plot_hs_bench(results: Sequence, path: str | Path) -> Path:
    """Vanilla budget needed to match hierarchical selection, HS budget normalised to 1."""
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        labels = ["x".join(map(str, r.m_per_stage)) for r in results]
        pos = np.arange(len(results))
        ax1.bar(pos - 0.2, [r.mean_ratio for r in results], 0.4, yerr=[r.stderr for r in results],
                color="0.3", label="doubling grid")
        ax1.bar(pos + 0.2, [r.mean_exact_ratio for r in results], 0.4, color="0.7", label="exact count")
        ax1.axhline(1.0, color="k", lw=0.6, ls="--")
        ax1.set_xticks(pos, labels)
        ax1.set_xlabel("samples per module")
        ax1.set_ylabel("vanilla / HS samples")
        ax1.legend(frameon=False)
        for r, label in zip(results, labels):
            g, frac = zip(*r.curve())
            ax2.plot(g, frac, marker="o", ms=3, label=label)
        ax2.set_xscale("log", base=2)
        ax2.set_xlabel("vanilla budget (HS = 1)")
        ax2.set_ylabel("fraction matched")
        ax2.legend(frameon=False)
        return _save(fig, path)


def plot_fwv(fwv: dict[float, float], path: str | Path, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        sig = sorted(fwv)
        ax.plot(sig, [fwv[s] for s in sig], marker="o", color="k")
        ax.set_xlabel("kernel bandwidth")
        ax.set_ylabel("faithfulness-weighted variance")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, float]], path: str | Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        names, values = zip(*rows)
        ax.bar(range(len(rows)), values, color="0.4")
        ax.set_xticks(range(len(rows)), names, rotation=20)
        ax.set_ylabel("proxy FID")
        return _save(fig, path)
