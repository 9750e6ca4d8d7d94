"""Binary mask algebra and resolution changes.

Masks are boolean [H, W] arrays. All set operations are elementwise; the
only lossy operation is downsampling to a feature grid, which takes the
block mean and thresholds at 0.5 so the result stays binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Mask:
    data: np.ndarray  # bool [H, W]
    resolution_tag: str = "image"

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ContractError(f"mask must be 2-D, got shape {self.data.shape}")
        if self.data.dtype != np.bool_:
            raise ContractError("mask data must be boolean")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()


def as_mask(array, resolution_tag: str = "image") -> Mask:
    """Coerce an array-like of {0,1} (or 0/255 bytes) into a Mask."""
    a = np.asarray(array)
    if a.dtype == np.bool_:
        return Mask(a.copy(), resolution_tag)
    vals = np.unique(a)
    if not np.all(np.isin(vals, (0, 1))) and not np.all(np.isin(vals, (0, 255))):
        raise ContractError(f"mask values must be binary, found {vals[:8]}")
    return Mask(a > 0, resolution_tag)


def full(shape: tuple[int, int], value: bool = True) -> Mask:
    return Mask(np.full(shape, value, dtype=bool))


def complement(m: Mask) -> Mask:
    return Mask(~m.data, m.resolution_tag)


def union(a: Mask, b: Mask) -> Mask:
    _same_grid(a, b)
    return Mask(a.data | b.data, a.resolution_tag)


def difference(a: Mask, b: Mask) -> Mask:
    """Cells in a and not in b."""
    _same_grid(a, b)
    return Mask(a.data & ~b.data, a.resolution_tag)


def translate(m: Mask, offset: tuple[int, int]) -> Mask:
    """Shift by (dy, dx). Any selected cell leaving the grid is a contract error."""
    dy, dx = offset
    h, w = m.shape
    ys, xs = np.nonzero(m.data)
    ny, nx = ys + dy, xs + dx
    if len(ys) and (
        ny.min() < 0 or nx.min() < 0 or ny.max() >= h or nx.max() >= w
    ):
        raise ContractError(f"translation {offset} pushes the mask out of the {h}x{w} grid")
    out = np.zeros_like(m.data)
    out[ny, nx] = True
    return Mask(out, m.resolution_tag)


def dilate(m: Mask, radius: int = 1) -> Mask:
    """Chebyshev dilation by `radius` cells."""
    if radius < 0:
        raise ContractError("dilation radius must be >= 0")
    out = m.data.copy()
    h, w = m.shape
    acc = np.zeros_like(out)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            acc[ys0:ys1, xs0:xs1] |= out[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return Mask(acc, m.resolution_tag)


def downsample(m: Mask, scale: int, resolution_tag: str = "feature") -> Mask:
    """Reduce by an integer factor: block mean thresholded at >= 0.5."""
    if scale < 1:
        raise ContractError("downsample scale must be >= 1")
    h, w = m.shape
    if h % scale or w % scale:
        raise ContractError(f"mask {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return Mask(m.data.copy(), resolution_tag)
    blocks = m.data.reshape(h // scale, scale, w // scale, scale)
    frac = blocks.mean(axis=(1, 3))
    return Mask(frac >= 0.5, resolution_tag)


def cells(m: Mask) -> np.ndarray:
    """Selected coordinates as an [n, 2] array of (y, x), row-major order."""
    ys, xs = np.nonzero(m.data)
    return np.stack([ys, xs], axis=1)


def bbox_center(m: Mask) -> tuple[float, float]:
    """Center of the bounding box of the selected cells."""
    if m.is_empty():
        raise ContractError("bounding box of an empty mask is undefined")
    ys, xs = np.nonzero(m.data)
    return ((ys.min() + ys.max()) / 2.0, (xs.min() + xs.max()) / 2.0)


def _same_grid(a: Mask, b: Mask) -> None:
    if a.shape != b.shape:
        raise ContractError(f"mask grids differ: {a.shape} vs {b.shape}")
