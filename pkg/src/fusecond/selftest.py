"""Built-in oracle-equivalence checks for the `selftest` CLI command.

Each check re-derives an operation's result with deliberately naive
code (explicit loops, full sorts) and compares against the production
path on randomized small instances.
"""

from __future__ import annotations

import math

import numpy as np

from .alignment import AlignmentConfig, RefineParams, forward_align, reverse_align
from .flow import CrossAttentionRecord
from .patch_grid import patch_indices
from .voxels import knn_vote_refine


def naive_patch_indices(pmask: np.ndarray) -> list[int]:
    rows, cols = pmask.shape
    out = []
    for r in range(rows):
        for c in range(cols):
            if pmask[r][c] == 1:
                out.append(r * cols + c)
    return out


def naive_softmax_row(row) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_forward_selection(logits_bhlt, heads, block, cols, threshold):
    """head-sum -> row softmax -> subset sum -> threshold, all loops."""
    _, _, ell, tcount = logits_bhlt.shape
    kept, scores = [], []
    for i in range(ell):
        row = [
            sum(logits_bhlt[block][h][i][j] for h in heads) for j in range(tcount)
        ]
        p = naive_softmax_row(row)
        score = sum(p[j] for j in cols)
        scores.append(score)
        if score >= threshold:
            kept.append(i)
    return kept, scores


def naive_reverse_selection(logits_bhlt, heads, block, unaligned, threshold):
    _, _, ell, tcount = logits_bhlt.shape
    kept, scores = [], []
    for j in range(tcount):
        col = [
            sum(logits_bhlt[block][h][i][j] for h in heads) for i in range(ell)
        ]
        p = naive_softmax_row(col)
        score = sum(p[i] for i in unaligned)
        scores.append(score)
        if score >= threshold:
            kept.append(j)
    return kept, scores


def naive_knn_vote(sel, positions, k, fill_frac, clear_frac):
    n = len(positions)
    selected = set(int(v) for v in sel)
    out = []
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            d2 = sum((int(positions[j][a]) - int(positions[i][a])) ** 2 for a in range(3))
            cand.append((d2, j))
        cand.sort()
        votes = sum(1 for _, j in cand[:k] if j in selected)
        if i in selected:
            if votes >= clear_frac * k:
                out.append(i)
        else:
            if votes >= fill_frac * k:
                out.append(i)
    return out


def check_patch_indices(seed: int = 0, trials: int = 50) -> bool:
    gen = np.random.default_rng(seed)
    for _ in range(trials):
        rows, cols = int(gen.integers(1, 16)), int(gen.integers(1, 16))
        pmask = gen.integers(0, 2, size=(rows, cols)).astype(np.uint8)
        if patch_indices(pmask).tolist() != naive_patch_indices(pmask):
            return False
    return True


def check_alignment(seed: int = 1, trials: int = 10) -> bool:
    gen = np.random.default_rng(seed)
    for _ in range(trials):
        ell, tcount, h = int(gen.integers(4, 20)), int(gen.integers(4, 25)), 2
        logits = gen.normal(size=(1, h, ell, tcount))
        record = CrossAttentionRecord(logits=logits, timestep=1.0)
        heads = [0, 1]
        cols = np.flatnonzero(gen.random(tcount) < 0.4)
        cfg = AlignmentConfig(head_subset=(0, 1), refine=RefineParams(enabled=False))
        pre, post, scores = forward_align(record, cols, cfg, positions=None)
        kept_o, scores_o = naive_forward_selection(logits, heads, 0, cols.tolist(), cfg.score_threshold)
        if pre.tolist() != kept_o or np.abs(scores - np.asarray(scores_o)).max() > 1e-9:
            return False
        unaligned = np.flatnonzero(gen.random(ell) < 0.5)
        kept, rscores = reverse_align(record, unaligned, cfg)
        kept_o, scores_o = naive_reverse_selection(
            logits, heads, 0, unaligned.tolist(), cfg.effective_reverse_threshold
        )
        if kept.tolist() != kept_o or np.abs(rscores - np.asarray(scores_o)).max() > 1e-9:
            return False
    return True


def check_knn_vote(seed: int = 2, trials: int = 10) -> bool:
    gen = np.random.default_rng(seed)
    for _ in range(trials):
        n = int(gen.integers(20, 80))
        flat = gen.choice(12**3, size=n, replace=False)
        flat.sort()
        positions = np.stack(np.unravel_index(flat, (12, 12, 12)), axis=1).astype(np.int64)
        sel = np.flatnonzero(gen.random(n) < 0.4)
        k = int(gen.integers(1, min(17, n)))
        got = knn_vote_refine(sel, positions, k, 0.6, 0.4)
        want = naive_knn_vote(sel, positions, k, 0.6, 0.4)
        if got.tolist() != want:
            return False
    return True


def run_selftest() -> list[tuple[str, bool]]:
    return [
        ("patch_indices vs naive scan", check_patch_indices()),
        ("alignment vs naive pipeline", check_alignment()),
        ("knn vote vs brute force", check_knn_vote()),
    ]
