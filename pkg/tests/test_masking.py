"""Anchor sampling, block corruption, and routing-mask tests.

The mask builder is checked against an independent brute-force oracle that
evaluates the two permission clauses (causal clean context, own-block
bidirectional) literally for every query/key pair.
"""

import numpy as np
import pytest
import torch

from orthrus import AnchorSet, build_diffusion_mask, build_training_batch, corrupt_block, sample_anchors
from orthrus.errors import SequenceTooShortError
from orthrus.masking import build_complementary_batch

MASK = 99  # stand-in mask token id for pure masking tests


def brute_force_mask(L: int, anchors: AnchorSet) -> torch.Tensor:
    """Literal per-entry evaluation of the routing rule."""
    B, K = anchors.n_blocks, anchors.block_len
    out = torch.zeros(B * K, L + B * K, dtype=torch.bool)
    for q in range(B * K):
        b = q // K
        a = anchors.anchors[b]
        for k in range(L + B * K):
            if k < L:
                out[q, k] = k <= a - 1
            else:
                out[q, k] = (k - L) // K == b
    return out


class TestSampleAnchors:
    def test_forced_anchor_at_minimum_length(self):
        anchors = sample_anchors(seq_len=5, B=6, K=4, seed=0)
        assert anchors.anchors == [1] * 6

    def test_determinism(self):
        a = sample_anchors(100, 8, 10, seed=42)
        b = sample_anchors(100, 8, 10, seed=42)
        assert a.anchors == b.anchors

    def test_range(self):
        anchors = sample_anchors(100, 500, 10, seed=1)
        assert all(1 <= a <= 90 for a in anchors.anchors)

    def test_too_short_sequence(self):
        with pytest.raises(SequenceTooShortError):
            sample_anchors(seq_len=4, B=1, K=4, seed=0)

    def test_uniformity_chi_square(self):
        """10k draws over [1, 90]: every cell within 3 sigma of the uniform count."""
        n, lo, hi = 10_000, 1, 90
        anchors = sample_anchors(100, n, 10, seed=7)
        counts = np.bincount(anchors.anchors, minlength=hi + 1)[lo:]
        p = 1.0 / (hi - lo + 1)
        expect = n * p
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - expect) <= 3 * sigma)


class TestCorruptBlock:
    def test_basic(self):
        blk = corrupt_block([5, 6, 7, 8], anchor=0, K=3, mask_token_id=MASK)
        assert blk.slots == [5, MASK, MASK]
        assert blk.anchor_token == 5

    def test_degenerate_single_slot(self):
        blk = corrupt_block([5, 6, 7, 8], anchor=2, K=1, mask_token_id=MASK)
        assert blk.slots == [7]

    def test_bounds(self):
        with pytest.raises(IndexError):
            corrupt_block([5, 6, 7, 8], anchor=2, K=3, mask_token_id=MASK)


class TestDiffusionMask:
    def test_hand_worked_single_block(self):
        """L=6, one block at anchor 3 with K=2: the first query sees clean keys
        {0,1,2} and its own block keys {6,7}, nothing else."""
        anchors = AnchorSet([3], block_len=2, seq_len=6)
        mask = build_diffusion_mask(6, anchors)
        assert mask.shape == (2, 8)
        row = mask[0]
        assert row.nonzero().flatten().tolist() == [0, 1, 2, 6, 7]

    def test_blocks_are_isolated(self):
        anchors = AnchorSet([2, 5], block_len=3, seq_len=10)
        mask = build_diffusion_mask(10, anchors)
        block0_keys = mask[:3, 10:13]
        block1_keys = mask[:3, 13:16]
        assert block0_keys.all()
        assert not block1_keys.any()
        assert mask[3:, 13:16].all()
        assert not mask[3:, 10:13].any()

    def test_intra_block_bidirectional(self):
        anchors = AnchorSet([4, 1, 7], block_len=4, seq_len=16)
        mask = build_diffusion_mask(16, anchors)
        for b in range(3):
            sub = mask[b * 4 : (b + 1) * 4, 16 + b * 4 : 16 + (b + 1) * 4]
            assert sub.all()

    def test_oracle_equivalence_100_random_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            K = int(rng.integers(1, 9))
            L = int(rng.integers(K + 1, 65))
            B = int(rng.integers(1, 9))
            anchors = sample_anchors(L, B, K, seed=int(rng.integers(0, 2**31)))
            fast = build_diffusion_mask(L, anchors)
            slow = brute_force_mask(L, anchors)
            assert torch.equal(fast, slow)

    def test_no_leakage(self):
        """No query may see clean context at or past its own anchor."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            K = int(rng.integers(1, 9))
            L = int(rng.integers(K + 1, 65))
            anchors = sample_anchors(L, int(rng.integers(1, 9)), K, seed=int(rng.integers(1e9)))
            mask = build_diffusion_mask(L, anchors)
            for q in range(mask.shape[0]):
                a = anchors.anchors[q // K]
                permitted = mask[q, :L].nonzero().flatten()
                assert (permitted <= a - 1).all()

    def test_no_all_false_rows(self):
        anchors = sample_anchors(32, 6, 4, seed=5)
        mask = build_diffusion_mask(32, anchors)
        assert bool(mask.any(dim=1).all())

    def test_block_permutation_equivariance(self):
        """Relabeling blocks permutes mask rows and block-key columns consistently."""
        L, K = 20, 3
        anchors = [2, 9, 14, 5]
        perm = [2, 0, 3, 1]
        base = build_diffusion_mask(L, AnchorSet(anchors, K, L))
        permuted = build_diffusion_mask(L, AnchorSet([anchors[i] for i in perm], K, L))
        row_perm = torch.tensor([p * K + k for p in perm for k in range(K)])
        col_perm = torch.cat([torch.arange(L), L + row_perm])
        assert torch.equal(permuted, base[row_perm][:, col_perm])


class TestTrainingBatch:
    def test_teacher_row_map(self):
        """Block at anchor 3 with K=2 targets the AR rows at clean positions 3, 4."""
        seq = list(range(10, 20))
        anchors = AnchorSet([3], block_len=2, seq_len=10)
        batch = build_training_batch(seq, anchors, mask_token_id=MASK)
        assert batch.teacher_rows == [3, 4]
        assert batch.block_tokens == [13, MASK]
        assert batch.block_positions == [3, 4]
        assert batch.hard_targets == [14, 15]

    def test_identical_anchors_identical_maps(self):
        seq = list(range(12))
        anchors = AnchorSet([4, 4], block_len=3, seq_len=12)
        batch = build_training_batch(seq, anchors, mask_token_id=MASK)
        assert batch.teacher_rows[:3] == batch.teacher_rows[3:]

    def test_shapes(self):
        seq = list(range(16))
        anchors = sample_anchors(16, B=3, K=4, seed=0)
        batch = build_training_batch(seq, anchors, mask_token_id=MASK)
        assert len(batch.block_tokens) == 12
        assert batch.mask.shape == (12, 16 + 12)

    def test_boundary_anchor_has_no_final_hard_target(self):
        """At the largest legal anchor the last slot's teacher row exists but
        the next clean token does not; the hard target is marked absent."""
        seq = list(range(8))
        anchors = AnchorSet([5], block_len=3, seq_len=8)  # slots at 5,6,7; next of 7 is off-end
        batch = build_training_batch(seq, anchors, mask_token_id=MASK)
        assert batch.hard_targets == [6, 7, -1]
        assert all(batch.supervised)


class TestComplementaryBatch:
    def test_supervision_covers_every_row_once_per_pair(self):
        rng = np.random.default_rng(0)
        seq = list(range(32))
        K = 6
        anchors = AnchorSet([4, 11], block_len=K, seq_len=32)
        batch = build_complementary_batch(seq, anchors, MASK, rng)
        assert len(batch.block_tokens) == 2 * 2 * K  # two views per anchor
        for pair in range(2):
            a_sup = batch.supervised[pair * 2 * K : pair * 2 * K + K]
            b_sup = batch.supervised[pair * 2 * K + K : (pair + 1) * 2 * K]
            for k in range(K - 1):
                assert a_sup[k] != b_sup[k]  # complementary masking
            assert a_sup[K - 1] and b_sup[K - 1]  # beyond-block row in both

    def test_half_of_maskable_slots_hidden(self):
        rng = np.random.default_rng(1)
        seq = list(range(32))
        K = 8
        anchors = AnchorSet([3], block_len=K, seq_len=32)
        batch = build_complementary_batch(seq, anchors, MASK, rng)
        view_a = batch.block_tokens[:K]
        assert view_a[0] == seq[3]  # anchor always visible
        assert sum(t == MASK for t in view_a) == K // 2
