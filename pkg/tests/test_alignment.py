import numpy as np
import pytest

from fusecond.alignment import (
    AlignmentConfig,
    RefineParams,
    forward_align,
    forward_scores,
    reverse_align,
    reverse_scores,
    select_heads,
)
from fusecond.errors import ParameterError
from fusecond.flow import CrossAttentionRecord
from fusecond.voxels import grid_to_positions


def make_record(seed, blocks=1, heads=4, voxels=8, tokens=6, scale=1.0):
    gen = np.random.default_rng(seed)
    logits = gen.normal(size=(blocks, heads, voxels, tokens)) * scale
    return CrossAttentionRecord(logits=logits, timestep=1.0)


def naive_row_softmax(row):
    e = np.exp(row - row.max())
    return e / e.sum()


class TestSelectHeads:
    def test_sharp_head_ranks_first(self):
        # head 0 is near-uniform, head 1 is a spike: lower entropy wins
        logits = np.zeros((1, 2, 4, 5))
        logits[0, 1, :, 0] = 30.0
        record = CrossAttentionRecord(logits=logits, timestep=1.0)
        assert select_heads(record, 1).tolist() == [1]
        assert select_heads(record, 2).tolist() == [1, 0]

    def test_matches_entropy_oracle(self):
        record = make_record(0, heads=5, scale=2.0)
        got = select_heads(record, 3)
        ent = []
        for head in range(5):
            rows = record.logits[0, head]
            h = 0.0
            for i in range(rows.shape[0]):
                p = naive_row_softmax(rows[i])
                h += -(p * np.log(p)).sum()
            ent.append(h / rows.shape[0])
        oracle = sorted(range(5), key=lambda i: (ent[i], i))[:3]
        assert got.tolist() == oracle

    def test_identical_heads_tie_by_index(self):
        gen = np.random.default_rng(1)
        base = gen.normal(size=(4, 5))
        logits = np.stack([base, base, base])[None]
        record = CrossAttentionRecord(logits=logits, timestep=1.0)
        assert select_heads(record, 2).tolist() == [0, 1]

    def test_count_bounds(self):
        record = make_record(2, heads=3)
        with pytest.raises(ParameterError):
            select_heads(record, 0)
        with pytest.raises(ParameterError):
            select_heads(record, 4)


class TestForwardScores:
    def test_full_column_set_gives_unit_scores(self):
        record = make_record(3)
        cfg = AlignmentConfig()
        scores = forward_scores(record, np.arange(6), cfg)
        assert np.abs(scores - 1.0).max() < 1e-12

    def test_empty_column_set_gives_zero(self):
        record = make_record(4)
        assert (forward_scores(record, np.empty(0), AlignmentConfig()) == 0).all()

    def test_matches_naive_pipeline(self):
        record = make_record(5, heads=4, voxels=7, tokens=9)
        cols = np.array([1, 4, 6])
        cfg = AlignmentConfig(head_count=2)
        got = forward_scores(record, cols, cfg)
        heads = select_heads(record, 2)
        summed = record.logits[0, heads].sum(axis=0)
        for i in range(7):
            p = naive_row_softmax(summed[i])
            assert abs(got[i] - p[cols].sum()) < 1e-9

    def test_shift_invariance(self):
        record = make_record(6)
        cfg = AlignmentConfig(head_subset=(0, 2))
        base = forward_scores(record, np.array([0, 3]), cfg)
        shifted = CrossAttentionRecord(logits=record.logits + 5.0, timestep=1.0)
        got = forward_scores(shifted, np.array([0, 3]), cfg)
        assert np.abs(base - got).max() < 1e-9

    def test_subset_monotonicity(self):
        record = make_record(7)
        cfg = AlignmentConfig(head_subset=(0,))
        small = forward_scores(record, np.array([1]), cfg)
        large = forward_scores(record, np.array([1, 2, 5]), cfg)
        assert (large >= small - 1e-15).all()

    def test_single_head_subset_is_plain_softmax_mass(self):
        record = make_record(8, heads=3)
        cfg = AlignmentConfig(head_subset=(2,))
        cols = np.array([0, 4])
        got = forward_scores(record, cols, cfg)
        for i in range(record.logits.shape[2]):
            p = naive_row_softmax(record.logits[0, 2, i])
            assert abs(got[i] - p[cols].sum()) < 1e-12

    def test_invalid_head_subset_rejected(self):
        record = make_record(9, heads=2)
        with pytest.raises(ParameterError):
            forward_scores(record, np.array([0]), AlignmentConfig(head_subset=(2,)))


class TestForwardAlign:
    def test_threshold_sweep_shrinks_selection(self):
        record = make_record(10, voxels=27, tokens=8, scale=2.0)
        positions = grid_to_positions(np.ones((3, 3, 3)))
        cols = np.array([0, 1, 2])
        sizes = []
        for thr in (0.0, 0.3, 0.6, 1.0):
            cfg = AlignmentConfig(score_threshold=thr, refine=RefineParams(enabled=False))
            pre, post, _ = forward_align(record, cols, cfg, positions)
            assert (pre == post).all()
            sizes.append(pre.size)
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[0] == 27

    def test_refine_applies_neighbor_vote(self):
        # craft scores so exactly one corner voxel passes the threshold;
        # refinement then clears it (no support among its neighbors)
        logits = np.zeros((1, 1, 27, 4))
        logits[0, 0, 0, 0] = 30.0
        record = CrossAttentionRecord(logits=logits, timestep=1.0)
        positions = grid_to_positions(np.ones((3, 3, 3)))
        cfg = AlignmentConfig(
            head_subset=(0,), refine=RefineParams(enabled=True, k=16, fill_frac=0.6, clear_frac=0.4)
        )
        pre, post, _ = forward_align(record, np.array([0]), cfg, positions)
        assert pre.tolist() == [0]
        assert post.size == 0


class TestReverse:
    def test_empty_unaligned_gives_zero(self):
        record = make_record(11)
        assert (reverse_scores(record, np.empty(0), AlignmentConfig()) == 0).all()

    def test_full_unaligned_gives_unit_scores(self):
        record = make_record(12)
        scores = reverse_scores(record, np.arange(8), AlignmentConfig())
        assert np.abs(scores - 1.0).max() < 1e-12

    def test_matches_naive_column_softmax(self):
        record = make_record(13, heads=4, voxels=6, tokens=7)
        rows = np.array([0, 2, 5])
        cfg = AlignmentConfig(head_count=3)
        got = reverse_scores(record, rows, cfg)
        heads = select_heads(record, 3)
        summed = record.logits[0, heads].sum(axis=0)
        for j in range(7):
            p = naive_row_softmax(summed[:, j])
            assert abs(got[j] - p[rows].sum()) < 1e-9

    def test_reverse_align_threshold(self):
        record = make_record(14, voxels=10, tokens=5, scale=3.0)
        rows = np.arange(5)
        cfg = AlignmentConfig(score_threshold=0.55)
        kept, scores = reverse_align(record, rows, cfg)
        assert kept.tolist() == np.flatnonzero(scores >= 0.55).tolist()

    def test_reverse_threshold_override(self):
        record = make_record(15, voxels=10, tokens=5, scale=3.0)
        rows = np.arange(4)
        loose = AlignmentConfig(score_threshold=0.9, reverse_threshold=0.0)
        kept, _ = reverse_align(record, rows, loose)
        assert kept.size == 5
        assert loose.effective_reverse_threshold == 0.0
        assert AlignmentConfig(score_threshold=0.9).effective_reverse_threshold == 0.9


class TestConfigValidation:
    def test_threshold_bounds(self):
        with pytest.raises(ParameterError):
            AlignmentConfig(score_threshold=1.5)
        with pytest.raises(ParameterError):
            AlignmentConfig(reverse_threshold=-0.1)
        with pytest.raises(ParameterError):
            AlignmentConfig(head_count=0)
