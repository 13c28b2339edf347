"""Multiplicative attention-scaling matrix over (voxel, token) cells.

Each source stamps its strength onto the cross product of its voxel
rows and token columns; untouched cells stay exactly 1. Where sources
overlap, the largest strength wins, which keeps the result independent
of source order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParameterError

DEFAULT_BETA = 1.0


@dataclass(frozen=True)
class EnhancementSource:
    rows: np.ndarray  # voxel indices
    cols: np.ndarray  # unified-token column indices (patch rows only)
    strength: float

    def __post_init__(self):
        if self.strength <= 0.0:
            raise ParameterError(f"strength must be positive, got {self.strength}")
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        object.__setattr__(self, "cols", np.asarray(self.cols, dtype=np.int64))


def default_lambda(selected_count: int, patch_total: int, beta: float = DEFAULT_BETA) -> float:
    """Strength from region coverage: 1 + beta * (1 - f) with
    f = selected_count / patch_total. Full coverage gives 1; smaller
    regions get proportionally larger strengths."""
    if patch_total < 1:
        raise ParameterError("patch_total must be >= 1")
    if not 0 <= selected_count <= patch_total:
        raise ParameterError(
            f"selected_count {selected_count} outside [0, {patch_total}]"
        )
    if beta < 0.0:
        raise ParameterError("beta must be >= 0")
    return 1.0 + beta * (1.0 - selected_count / patch_total)


def build_enhancement(
    sources: list[EnhancementSource], voxel_count: int, token_count: int
) -> np.ndarray:
    """Dense voxel_count x token_count scaling matrix."""
    e = np.ones((voxel_count, token_count))
    covered = np.zeros((voxel_count, token_count), dtype=bool)
    for src in sources:
        if src.rows.size and (src.rows.min() < 0 or src.rows.max() >= voxel_count):
            raise GeometryError("enhancement row index out of range")
        if src.cols.size and (src.cols.min() < 0 or src.cols.max() >= token_count):
            raise GeometryError("enhancement column index out of range")
        if src.rows.size == 0 or src.cols.size == 0:
            continue
        ix = np.ix_(src.rows, src.cols)
        e[ix] = np.where(covered[ix], np.maximum(e[ix], src.strength), src.strength)
        covered[ix] = True
    return e


def apply_enhancement(logits: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Elementwise product, meant to run before the softmax."""
    if logits.shape != e.shape:
        raise GeometryError(f"shape mismatch {logits.shape} vs {e.shape}")
    return logits * e
