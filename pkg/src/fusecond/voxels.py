"""Sparse voxel lattice: positions, latents, set algebra, and the
one-pass majority-vote refinement of voxel selections.

The vote kernel is the only scalar-heavy inner loop in the package; a
compiled implementation is used when available, with a numpy fallback
selected at import time. Both produce identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyStructureError, GeometryError, ParameterError

try:
    from . import _voxel_core as _kernel
except ImportError:  # extension not built
    from . import _voxel_core_py as _kernel

KERNEL_BACKEND = _kernel.BACKEND

DEFAULT_VOTE_NEIGHBORS = 16
DEFAULT_FILL_FRACTION = 0.6
DEFAULT_CLEAR_FRACTION = 0.4


@dataclass(frozen=True)
class SparseVoxelLatent:
    grid_size: int
    positions: np.ndarray  # L x 3, lexicographically sorted
    latents: np.ndarray  # L x C float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise GeometryError("positions must be a non-empty L x 3 array")
        if pos.min() < 0 or pos.max() >= self.grid_size:
            raise GeometryError(f"positions out of [0, {self.grid_size}) range")
        flat = (pos[:, 0] * self.grid_size + pos[:, 1]) * self.grid_size + pos[:, 2]
        if (np.diff(flat) <= 0).any():
            raise GeometryError("positions must be strictly lexicographically sorted")
        lat = np.asarray(self.latents)
        if lat.shape[0] != pos.shape[0] or lat.ndim != 2:
            raise GeometryError("latents must be L x C")
        if not np.isfinite(lat).all():
            raise GeometryError("latents must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "latents", lat)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def channels(self) -> int:
        return self.latents.shape[1]


def grid_to_positions(grid: np.ndarray) -> np.ndarray:
    """Lexicographically sorted positions of all set cells of an NxNxN
    binary grid."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise GeometryError("grid must be 3-D")
    positions = np.argwhere(grid != 0).astype(np.int64)
    if positions.shape[0] == 0:
        raise EmptyStructureError("binary grid has no active cells")
    return positions  # argwhere over C-ordered array is already lexicographic


def positions_to_grid(positions: np.ndarray, grid_size: int) -> np.ndarray:
    grid = np.zeros((grid_size,) * 3, dtype=np.uint8)
    positions = np.asarray(positions, dtype=np.int64)
    grid[positions[:, 0], positions[:, 1], positions[:, 2]] = 1
    return grid


def validate_selection(sel: np.ndarray, count: int) -> np.ndarray:
    sel = np.asarray(sel, dtype=np.int64)
    if sel.size:
        if (np.diff(sel) <= 0).any():
            raise GeometryError("selection must be strictly increasing")
        if sel[0] < 0 or sel[-1] >= count:
            raise GeometryError(f"selection index out of [0, {count})")
    return sel


def knn_vote_refine(
    sel: np.ndarray,
    positions: np.ndarray,
    k: int = DEFAULT_VOTE_NEIGHBORS,
    fill_frac: float = DEFAULT_FILL_FRACTION,
    clear_frac: float = DEFAULT_CLEAR_FRACTION,
) -> np.ndarray:
    """One-pass majority vote over the k nearest lattice neighbors.

    All votes are computed against the input selection: an unselected
    voxel is added iff at least fill_frac * k of its neighbors are
    selected; a selected voxel is removed iff fewer than clear_frac * k
    are. Neighbor ties at equal distance break by lexicographic
    position order (equivalently ascending voxel index).
    """
    positions = np.asarray(positions, dtype=np.int64)
    n = positions.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"neighbor count k={k} must satisfy 1 <= k < L={n}")
    if not 0.0 <= clear_frac <= fill_frac <= 1.0:
        raise ParameterError(
            f"need 0 <= clear_frac <= fill_frac <= 1, got {clear_frac}, {fill_frac}"
        )
    sel = validate_selection(sel, n)
    selected = np.zeros(n, dtype=np.uint8)
    selected[sel] = 1
    counts = np.asarray(_kernel.knn_vote_counts(positions, selected, k))
    fill = counts >= fill_frac * k
    keep = counts >= clear_frac * k
    out = np.where(selected == 1, keep, fill)
    return np.flatnonzero(out).astype(np.int64)


def unaligned_complement(sels: list[np.ndarray], count: int) -> np.ndarray:
    """Indices in [0, count) not contained in any given selection."""
    member = np.zeros(count, dtype=bool)
    for sel in sels:
        sel = validate_selection(sel, count)
        member[sel] = True
    return np.flatnonzero(~member).astype(np.int64)
