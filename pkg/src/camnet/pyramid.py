"""Multi-resolution image stacks for conditioning and intermediate supervision."""
from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor

from .errors import ShapeError
from .numerics import box_down2, nearest_up2


@dataclass
class ImagePyramid:
    """Images ordered coarse to fine; ``levels[k+1]`` is twice the size of ``levels[k]``."""

    levels: list[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> Tensor:
        return self.levels[k]

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.levels]

    def select(self, index) -> "ImagePyramid":
        """Sub-batch of every level (``index`` is anything a tensor accepts on dim 0)."""
        return ImagePyramid([t[index] for t in self.levels])

    def validate(self) -> None:
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.shape[-2] != 2 * lo.shape[-2] or hi.shape[-1] != 2 * lo.shape[-1]:
                raise ShapeError(f"pyramid levels {tuple(lo.shape)} -> {tuple(hi.shape)} are not a 2x step")


def build_pyramid(full: Tensor, K: int) -> ImagePyramid:
    """Repeated 2x box downsampling of a batch ``full`` (N, C, H, W) into ``K`` levels."""
    if K < 1:
        raise ShapeError(f"pyramid depth must be >= 1, got {K}")
    if full.dim() != 4:
        raise ShapeError(f"expected a 4-D batch, got shape {tuple(full.shape)}")
    step = 2 ** (K - 1)
    h, w = full.shape[-2:]
    if h % step or w % step:
        raise ShapeError(f"{h}x{w} image cannot be halved {K - 1} times")
    levels = [full]
    for _ in range(K - 1):
        levels.append(box_down2(levels[-1]))
    return ImagePyramid(levels[::-1])


def target_pyramid(y: Tensor, K: int) -> ImagePyramid:
    return build_pyramid(y, K)


def conditioning_pyramid(x: Tensor, resolutions: list[int]) -> ImagePyramid:
    """Conditioning inputs for modules at ``resolutions`` (coarse to fine).

    Levels coarser than ``x`` are box-downsampled from it; finer levels are
    nearest-upsampled copies, so a low-resolution input reaches only the
    module(s) at or below its own size.
    """
    r_in = x.shape[-1]
    levels = []
    for r in resolutions:
        t = x
        if r <= r_in:
            if r_in % r or (r_in // r) & (r_in // r - 1):
                raise ShapeError(f"cannot box-downsample {r_in} to {r}")
            while t.shape[-1] > r:
                t = box_down2(t)
        else:
            if r % r_in or (r // r_in) & (r // r_in - 1):
                raise ShapeError(f"cannot upsample {r_in} to {r} by doubling")
            while t.shape[-1] < r:
                t = nearest_up2(t)
        levels.append(t)
    return ImagePyramid(levels)
