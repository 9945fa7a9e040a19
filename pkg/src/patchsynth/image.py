"""Image representation, Gaussian pyramid operator and patch operators.

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, column]``
with intensities nominally in [0, 1]. Values outside that range are
allowed in intermediate results; clamping happens only on export.

Most functions also accept stacks of images (``(..., H, W)``) so that a
whole training corpus can be pushed through the pyramid in one call.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, DimensionError

__all__ = [
    "PatchLocation",
    "GAUSSIAN_KERNEL",
    "as_image",
    "downsample",
    "downsample_matrix",
    "build_pyramid",
    "upsample_bilinear",
    "extract_patch",
    "insert_patch",
    "accumulate_patch",
    "patch_average",
]


class PatchLocation(NamedTuple):
    """Top-left corner of a patch at a given pyramid layer."""

    x: int
    y: int
    layer: int = 0

    def halved(self) -> "PatchLocation":
        """Location of the co-located patch one layer coarser."""
        return PatchLocation(self.x // 2, self.y // 2, self.layer + 1)


def _gaussian_kernel_3x3(sigma: float = 1.0) -> np.ndarray:
    t = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


GAUSSIAN_KERNEL = _gaussian_kernel_3x3()
GAUSSIAN_KERNEL.setflags(write=False)


def as_image(data, *, allow_stack: bool = False) -> np.ndarray:
    """Validate and convert ``data`` to a float64 image (or image stack)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim < 2 or (arr.ndim > 2 and not allow_stack):
        raise DimensionError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise DimensionError(f"image must be at least 1x1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError("image contains NaN or Inf values")
    return arr


def downsample(img) -> np.ndarray:
    """Blur with the 3x3 sigma=1 Gaussian and keep even-indexed samples.

    Borders use replicate padding. Works on the last two axes, so a stack
    of shape ``(N, H, W)`` yields ``(N, H/2, W/2)``.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise DimensionError(f"expected at least 2 dimensions, got {arr.shape}")
    h, w = arr.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"downsample needs even dimensions, got {h}x{w}")
    pad = [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(arr, pad, mode="edge")
    out = np.zeros(arr.shape[:-2] + (h // 2, w // 2))
    for a in range(3):
        for b in range(3):
            out += GAUSSIAN_KERNEL[a, b] * p[..., a : a + h : 2, b : b + w : 2]
    return out


@lru_cache(maxsize=32)
def downsample_matrix(height: int, width: int) -> sp.csr_matrix:
    """Sparse matrix of :func:`downsample` acting on row-major vectors."""
    if height % 2 or width % 2:
        raise DimensionError(f"downsample needs even dimensions, got {height}x{width}")
    oh, ow = height // 2, width // 2
    rows, cols, vals = [], [], []
    r, c = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    out_index = (r * ow + c).ravel()
    for a in range(3):
        for b in range(3):
            yy = np.clip(2 * r + a - 1, 0, height - 1)
            xx = np.clip(2 * c + b - 1, 0, width - 1)
            rows.append(out_index)
            cols.append((yy * width + xx).ravel())
            vals.append(np.full(out_index.size, GAUSSIAN_KERNEL[a, b]))
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(oh * ow, height * width),
    )
    return m.tocsr()  # duplicates from clamped borders are summed here


def build_pyramid(img, depth: int) -> list[np.ndarray]:
    """Return ``[V^0, ..., V^depth]`` with ``V^0 = img``."""
    arr = as_image(img, allow_stack=True)
    if depth < 0:
        raise DimensionError("pyramid depth must be non-negative")
    h, w = arr.shape[-2:]
    f = 2**depth
    if h % f or w % f:
        raise DimensionError(f"{h}x{w} image is not divisible by 2^{depth}")
    levels = [arr]
    for _ in range(depth):
        levels.append(downsample(levels[-1]))
    return levels


def _bilinear_matrix(n: int) -> np.ndarray:
    # output sample u sits at input coordinate (u + 0.5) / 2 - 0.5
    s = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = s - i0
    m = np.zeros((2 * n, n))
    m[np.arange(2 * n), i0] += 1.0 - f
    m[np.arange(2 * n), i1] += f
    return m


def upsample_bilinear(img) -> np.ndarray:
    """2x bilinear upscaling with half-pixel alignment (stack-aware)."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[-2:]
    return _bilinear_matrix(h) @ arr @ _bilinear_matrix(w).T


def _check_bounds(shape, loc, side: int) -> None:
    h, w = shape[-2:]
    x, y = int(loc[0]), int(loc[1])
    if side < 1 or x < 0 or y < 0 or x + side > w or y + side > h:
        raise BoundsError(f"{side}x{side} patch at (x={x}, y={y}) exceeds {h}x{w} image")


def extract_patch(img, loc, side: int) -> np.ndarray:
    """Row-major vector of the ``side x side`` block whose top-left is ``loc``."""
    arr = np.asarray(img, dtype=np.float64)
    _check_bounds(arr.shape, loc, side)
    x, y = int(loc[0]), int(loc[1])
    block = arr[..., y : y + side, x : x + side]
    return block.reshape(arr.shape[:-2] + (side * side,)).copy()


def insert_patch(img: np.ndarray, patch, loc) -> None:
    """Overwrite the block at ``loc`` with ``patch`` (in place)."""
    patch = np.asarray(patch, dtype=np.float64)
    side = int(round(np.sqrt(patch.shape[-1])))
    if side * side != patch.shape[-1]:
        raise DimensionError(f"patch length {patch.shape[-1]} is not a square")
    _check_bounds(img.shape, loc, side)
    x, y = int(loc[0]), int(loc[1])
    img[..., y : y + side, x : x + side] = patch.reshape(patch.shape[:-1] + (side, side))


def accumulate_patch(canvas: np.ndarray, counts: np.ndarray, patch, loc) -> None:
    """Add ``patch`` into ``canvas`` at ``loc`` and bump the coverage counts.

    ``canvas`` may carry leading batch axes; ``counts`` is always 2-D since
    the coverage pattern is shared by every image in a batch.
    """
    patch = np.asarray(patch, dtype=np.float64)
    side = int(round(np.sqrt(patch.shape[-1])))
    if side * side != patch.shape[-1]:
        raise DimensionError(f"patch length {patch.shape[-1]} is not a square")
    _check_bounds(canvas.shape, loc, side)
    x, y = int(loc[0]), int(loc[1])
    canvas[..., y : y + side, x : x + side] += patch.reshape(patch.shape[:-1] + (side, side))
    counts[y : y + side, x : x + side] += 1


def patch_average(canvas: np.ndarray, counts: np.ndarray, fill=None) -> np.ndarray:
    """Divide accumulated patches by their counts.

    Pixels with zero coverage take their value from ``fill`` (or 0).
    """
    covered = counts > 0
    out = np.zeros(canvas.shape) if fill is None else np.array(fill, dtype=np.float64, copy=True)
    out = np.broadcast_to(out, canvas.shape).copy()
    out[..., covered] = canvas[..., covered] / counts[covered]
    return out
