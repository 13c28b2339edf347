"""Pure-numpy voxel vote kernel, used when the compiled extension is
unavailable. Must produce results identical to the compiled path."""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def knn_vote_counts(positions: np.ndarray, selected: np.ndarray, k: int) -> np.ndarray:
    """For each voxel, the number of selected voxels among its k nearest
    neighbors (self excluded, squared Euclidean distance, ties broken by
    ascending voxel index)."""
    n = positions.shape[0]
    pos = positions.astype(np.int64)
    idx = np.arange(n)
    counts = np.empty(n, dtype=np.int64)
    for i in range(n):
        d2 = ((pos - pos[i]) ** 2).sum(axis=1)
        d2[i] = np.iinfo(np.int64).max  # exclude self
        order = np.lexsort((idx, d2))[:k]
        counts[i] = int(selected[order].sum())
    return counts
