"""Patchwise DCT views of normalized CT slices.

A slice of size H x W is cut into non-overlapping p x p patches, each patch is
transformed with the orthonormal 2D DCT-II, and coefficient (i, j) of every
patch is gathered into one channel.  The result is a cube of p*p channels over
an (H/p) x (W/p) grid, one channel per spatial frequency.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, ShapeError

if TYPE_CHECKING:
    from .data_io import CtVolume

CHANNEL_ORDERS = ("zigzag", "row_major")


@dataclass
class SliceSample:
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ShapeError(f"image must be 2D, got shape {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ShapeError(
                f"mask shape {self.mask.shape} != image shape {self.image.shape}")


@dataclass
class DctCube:
    coefficients: np.ndarray  # (p*p, H/p, W/p)
    patch_size: int
    channel_order: str = "zigzag"
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return self.coefficients.shape[0]


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k holds frequency k sampled at n points."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * x + 1) * k / (2 * n))
    alpha = np.full((n, 1), np.sqrt(2.0 / n))
    alpha[0] = np.sqrt(1.0 / n)
    out = alpha * basis
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def frequency_order(p: int, order: str = "zigzag") -> tuple[tuple[int, int], ...]:
    """Map channel index -> (row frequency, column frequency).

    ``zigzag`` follows the JPEG scan so that low frequencies form a prefix.
    """
    if order == "row_major":
        return tuple((i, j) for i in range(p) for j in range(p))
    if order != "zigzag":
        raise ConfigurationError(f"unknown channel order {order!r}; expected one of {CHANNEL_ORDERS}")
    out = []
    for s in range(2 * p - 1):
        lo, hi = max(0, s - p + 1), min(s, p - 1)
        rows = range(lo, hi + 1) if s % 2 else range(hi, lo - 1, -1)
        out.extend((i, s - i) for i in rows)
    return tuple(out)


def _check_patch(patch: np.ndarray, p: Optional[int]) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"patch must be square 2D, got shape {patch.shape}")
    if p is not None and patch.shape[0] != p:
        raise ShapeError(f"expected {p}x{p} patch, got {patch.shape}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite values")
    return patch


def patch_dct(patch: np.ndarray, p: Optional[int] = None) -> np.ndarray:
    """Orthonormal 2D DCT-II of a square patch."""
    patch = _check_patch(patch, p)
    c = dct_matrix(patch.shape[0])
    return c @ patch @ c.T


def inverse_patch_dct(coefficients: np.ndarray, p: Optional[int] = None) -> np.ndarray:
    coefficients = _check_patch(coefficients, p)
    c = dct_matrix(coefficients.shape[0])
    return c.T @ coefficients @ c


def build_dct_cube(sample, p: int = 8, order: str = "zigzag") -> DctCube:
    """Gather per-patch DCT coefficients into a (p*p, H/p, W/p) cube (before FN).

    ``sample`` may be a :class:`SliceSample` or a bare 2D array.
    """
    image = sample.image if isinstance(sample, SliceSample) else np.asarray(sample)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"image must be 2D, got shape {image.shape}")
    h, w = image.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"image size {h}x{w} is not divisible by patch size {p}")
    c = dct_matrix(p)
    patches = image.reshape(h // p, p, w // p, p)
    # coeffs[a, b, i, j] = sum_{x,y} c[i,x] patch[a,x,b,y] c[j,y]
    coeffs = np.einsum("ix,axby,jy->abij", c, patches, c, optimize=True)
    idx = frequency_order(p, order)
    rows = np.array([i for i, _ in idx])
    cols = np.array([j for _, j in idx])
    cube = np.ascontiguousarray(coeffs[:, :, rows, cols].transpose(2, 0, 1))
    return DctCube(coefficients=cube, patch_size=p, channel_order=order)


def channel_min_max(cube: DctCube) -> tuple[np.ndarray, np.ndarray]:
    flat = cube.coefficients.reshape(cube.n_views, -1)
    return flat.min(axis=1), flat.max(axis=1)


def freq_normalize(cube: DctCube, stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> DctCube:
    """Min-max every channel to [0, 1]; constant channels become zeros.

    ``stats`` optionally supplies dataset-wide (min, max) per channel; values
    are clipped into [0, 1] in that case.
    """
    coeffs = cube.coefficients
    lo, hi = stats if stats is not None else channel_min_max(cube)
    lo = np.asarray(lo, dtype=np.float64)[:, None, None]
    span = (np.asarray(hi, dtype=np.float64)[:, None, None] - lo)
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (coeffs - lo) / safe, 0.0)
    if stats is not None:
        out = np.clip(out, 0.0, 1.0)
    return dataclasses.replace(cube, coefficients=out, normalized=True)


def slice_to_views(image: np.ndarray, p: int = 8, order: str = "zigzag") -> np.ndarray:
    """Normalized cube as float32, the form fed to networks."""
    return freq_normalize(build_dct_cube(image, p, order)).coefficients.astype(np.float32)


def subject_normalize(volume: "CtVolume", drop_lesion_free: bool = False) -> "CtVolume":
    """Per-subject min-max to [0, 1], optionally dropping slices with empty masks."""
    voxels = np.asarray(volume.voxels, dtype=np.float64)
    if voxels.size == 0:
        raise DegenerateInputError(f"volume {volume.subject_id!r} is empty")
    mask = volume.mask
    indices = volume.slice_indices
    if drop_lesion_free:
        if mask is None:
            raise ConfigurationError(
                f"drop_lesion_free requires masks; subject {volume.subject_id!r} has none")
        keep = mask.reshape(mask.shape[0], -1).any(axis=1)
        voxels = voxels[keep]
        mask = mask[keep]
        if indices is not None:
            indices = np.asarray(indices)[keep]
        if voxels.size == 0:
            raise DegenerateInputError(f"volume {volume.subject_id!r} has no lesion slices")
    lo, hi = voxels.min(), voxels.max()
    if hi == lo:
        raise DegenerateInputError(f"volume {volume.subject_id!r} is constant ({lo})")
    normalized = (voxels - lo) / (hi - lo)
    return dataclasses.replace(volume, voxels=normalized, mask=mask, slice_indices=indices)
