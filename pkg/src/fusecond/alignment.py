"""Bidirectional token/voxel alignment from captured attention logits.

Forward: sum logits over a subset of sharp heads, softmax each voxel
row over the token axis, sum the weights over the selected token
columns, threshold, then vote-refine the kept voxels. Reverse: same
head sum, softmax each token column over the voxel axis, sum over the
unaligned voxel rows, threshold. Head sharpness is ranked by mean row
entropy of the post-softmax maps (ascending).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import softmax_rows
from .errors import ParameterError
from .flow import CrossAttentionRecord
from .voxels import (
    DEFAULT_CLEAR_FRACTION,
    DEFAULT_FILL_FRACTION,
    DEFAULT_VOTE_NEIGHBORS,
    knn_vote_refine,
)

DEFAULT_SCORE_THRESHOLD = 0.55
DEFAULT_HEAD_COUNT = 3


@dataclass(frozen=True)
class RefineParams:
    enabled: bool = True
    k: int = DEFAULT_VOTE_NEIGHBORS
    fill_frac: float = DEFAULT_FILL_FRACTION
    clear_frac: float = DEFAULT_CLEAR_FRACTION


@dataclass(frozen=True)
class AlignmentConfig:
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    reverse_threshold: float | None = None  # defaults to score_threshold
    head_subset: tuple[int, ...] | None = None  # explicit list wins over head_count
    head_count: int = DEFAULT_HEAD_COUNT
    block_index: int = 0
    refine: RefineParams = field(default_factory=RefineParams)

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ParameterError("score_threshold must be in [0,1]")
        if self.reverse_threshold is not None and not 0.0 <= self.reverse_threshold <= 1.0:
            raise ParameterError("reverse_threshold must be in [0,1]")
        if self.head_count < 1:
            raise ParameterError("head_count must be >= 1")

    @property
    def effective_reverse_threshold(self) -> float:
        return (
            self.score_threshold
            if self.reverse_threshold is None
            else self.reverse_threshold
        )


def select_heads(record: CrossAttentionRecord, n: int, block_index: int = 0) -> np.ndarray:
    """Top n heads of one block by ascending mean row entropy of their
    token-axis softmax maps (sharper heads first); ties break by head
    index."""
    h = record.head_count
    if not 1 <= n <= h:
        raise ParameterError(f"head count n={n} outside [1, {h}]")
    entropies = np.empty(h)
    for head in range(h):
        p = softmax_rows(record.logits[block_index, head])
        entropies[head] = -(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean()
    order = np.lexsort((np.arange(h), entropies))
    return order[:n].astype(np.int64)


def _head_sum(record: CrossAttentionRecord, cfg: AlignmentConfig) -> np.ndarray:
    if cfg.head_subset is not None:
        heads = np.asarray(cfg.head_subset, dtype=np.int64)
        if heads.size == 0 or heads.min() < 0 or heads.max() >= record.head_count:
            raise ParameterError(f"head subset {cfg.head_subset} invalid")
    else:
        heads = select_heads(record, min(cfg.head_count, record.head_count), cfg.block_index)
    return record.logits[cfg.block_index, heads].sum(axis=0)


def forward_scores(record: CrossAttentionRecord, token_columns: np.ndarray, cfg: AlignmentConfig) -> np.ndarray:
    """Per-voxel alignment score in [0,1]: token-axis softmax mass over
    the selected columns, after head summation."""
    summed = _head_sum(record, cfg)
    weights = softmax_rows(summed)
    token_columns = np.asarray(token_columns, dtype=np.int64)
    if token_columns.size == 0:
        return np.zeros(weights.shape[0])
    return weights[:, token_columns].sum(axis=1)


def forward_align(
    record: CrossAttentionRecord,
    token_columns: np.ndarray,
    cfg: AlignmentConfig,
    positions: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxels aligned with the given token columns.

    Returns (pre-refinement selection, refined selection, scores).
    """
    scores = forward_scores(record, token_columns, cfg)
    pre = np.flatnonzero(scores >= cfg.score_threshold).astype(np.int64)
    if cfg.refine.enabled:
        post = knn_vote_refine(
            pre, positions, cfg.refine.k, cfg.refine.fill_frac, cfg.refine.clear_frac
        )
    else:
        post = pre
    return pre, post, scores


def reverse_scores(record: CrossAttentionRecord, unaligned: np.ndarray, cfg: AlignmentConfig) -> np.ndarray:
    """Per-token score in [0,1]: voxel-axis softmax mass over the
    unaligned voxel rows, after head summation."""
    summed = _head_sum(record, cfg)
    weights = softmax_rows(summed.T).T  # softmax over the voxel axis, per column
    unaligned = np.asarray(unaligned, dtype=np.int64)
    if unaligned.size == 0:
        return np.zeros(weights.shape[1])
    return weights[unaligned, :].sum(axis=0)


def reverse_align(
    record: CrossAttentionRecord, unaligned: np.ndarray, cfg: AlignmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Token columns aligned with the unaligned voxels (no lattice, so
    no vote refinement). Returns (kept columns, scores)."""
    scores = reverse_scores(record, unaligned, cfg)
    kept = np.flatnonzero(scores >= cfg.effective_reverse_threshold).astype(np.int64)
    return kept, scores
