"""Image/patch geometry: mask downsampling and flattened token index sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

DEFAULT_PATCH_SIZE = 14
DEFAULT_COVERAGE_THRESHOLD = 0.5


@dataclass(frozen=True)
class ImageGeometry:
    """Pixel dimensions plus the patch size they must divide evenly."""

    height_px: int
    width_px: int
    patch_size_px: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if self.height_px <= 0 or self.width_px <= 0 or self.patch_size_px <= 0:
            raise GeometryError(f"dimensions must be positive, got {self}")
        if self.height_px % self.patch_size_px or self.width_px % self.patch_size_px:
            raise GeometryError(
                f"{self.height_px}x{self.width_px} not divisible by patch size "
                f"{self.patch_size_px}"
            )

    @property
    def rows(self) -> int:
        return self.height_px // self.patch_size_px

    @property
    def cols(self) -> int:
        return self.width_px // self.patch_size_px

    @property
    def patch_count(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class TokenLayout:
    """Sequence layout: CLS at 0, registers at 1..r, patches after."""

    register_count: int
    patch_count: int

    def __post_init__(self):
        if self.register_count < 0:
            raise GeometryError("register_count must be >= 0")
        if self.patch_count <= 0:
            raise GeometryError("patch_count must be positive")

    @property
    def total_count(self) -> int:
        return 1 + self.register_count + self.patch_count

    @property
    def patch_offset(self) -> int:
        """Sequence position of patch index 0."""
        return 1 + self.register_count

    def patch_position(self, patch_index: int) -> int:
        if not 0 <= patch_index < self.patch_count:
            raise GeometryError(f"patch index {patch_index} out of range")
        return self.patch_offset + patch_index


def token_layout(geom: ImageGeometry, register_count: int) -> TokenLayout:
    return TokenLayout(register_count=register_count, patch_count=geom.patch_count)


def validate_region_mask(mask: np.ndarray, geom: ImageGeometry) -> np.ndarray:
    """Checks a pixel mask against a geometry; returns it as uint8."""
    mask = np.asarray(mask)
    if mask.shape != (geom.height_px, geom.width_px):
        raise GeometryError(
            f"mask shape {mask.shape} does not match geometry "
            f"{geom.height_px}x{geom.width_px}"
        )
    if not np.isin(mask, (0, 1)).all():
        raise GeometryError("mask values must be 0 or 1")
    return mask.astype(np.uint8)


def downsample_mask(
    mask: np.ndarray,
    geom: ImageGeometry,
    coverage_threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> np.ndarray:
    """Per-patch pixel-coverage downsampling of a pixel mask.

    A patch is set iff the fraction of set pixels inside its PxP block is
    >= coverage_threshold.
    """
    if not 0.0 <= coverage_threshold <= 1.0:
        raise GeometryError(f"coverage threshold {coverage_threshold} not in [0,1]")
    mask = validate_region_mask(mask, geom)
    p = geom.patch_size_px
    counts = mask.reshape(geom.rows, p, geom.cols, p).sum(axis=(1, 3))
    if coverage_threshold == 0.0:
        # threshold 0: any set pixel marks the patch
        return (counts >= 1).astype(np.uint8)
    return (counts >= coverage_threshold * p * p).astype(np.uint8)


def patch_indices(pmask: np.ndarray) -> np.ndarray:
    """Sorted flattened indices of set patches (i = row * cols + col)."""
    pmask = np.asarray(pmask)
    if pmask.ndim != 2:
        raise GeometryError("patch mask must be 2-D")
    if not np.isin(pmask, (0, 1)).all():
        raise GeometryError("patch mask values must be 0 or 1")
    return np.flatnonzero(pmask.ravel()).astype(np.int64)


def indices_to_patch_mask(indices: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of patch_indices for a known grid shape."""
    flat = np.zeros(rows * cols, dtype=np.uint8)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= rows * cols):
        raise GeometryError("patch index out of range")
    flat[indices] = 1
    return flat.reshape(rows, cols)
