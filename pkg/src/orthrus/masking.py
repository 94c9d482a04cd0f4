"""Training-block construction: anchors, corrupted blocks, and the routing mask.

The diffusion view trains on B corrupted blocks cut from a clean sequence of
length L. Each block keeps its first token visible (the anchor) and replaces
the remaining K-1 slots with the mask token. All blocks are concatenated and
processed in one pass against the clean sequence's KV cache under a single
boolean routing mask: block queries see the clean context strictly before
their own anchor, plus every slot of their own block bidirectionally, and
nothing of any other block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import SequenceTooShortError


@dataclass
class AnchorSet:
    """B anchor positions for blocks of length K inside a length-L sequence."""

    anchors: list[int]
    block_len: int
    seq_len: int

    def __post_init__(self) -> None:
        K, L = self.block_len, self.seq_len
        for a in self.anchors:
            if a < 1:
                raise ValueError(f"anchor {a} has no preceding context")
            if a + K - 1 > L - 1:
                raise ValueError(f"anchor {a} with K={K} overruns sequence of length {L}")

    @property
    def n_blocks(self) -> int:
        return len(self.anchors)


@dataclass
class CorruptedBlock:
    """Anchor token followed by K-1 mask slots, placed at the anchor position."""

    slots: list[int]
    anchor_pos: int

    @property
    def anchor_token(self) -> int:
        return self.slots[0]


def sample_anchors(seq_len: int, B: int, K: int, seed: int) -> AnchorSet:
    """Draw B anchors uniformly from [1, L-K], with replacement.

    Blocks may overlap in source text; the routing mask keeps them from
    interacting. Deterministic given the seed.
    """
    if seq_len < K + 1:
        raise SequenceTooShortError(f"need seq_len >= K+1, got L={seq_len}, K={K}")
    if B < 1:
        raise ValueError("need at least one block")
    rng = np.random.default_rng(seed)
    anchors = rng.integers(1, seq_len - K + 1, size=B).tolist()
    return AnchorSet(anchors=anchors, block_len=K, seq_len=seq_len)


def corrupt_block(sequence: list[int], anchor: int, K: int, mask_token_id: int) -> CorruptedBlock:
    """Corrupt the K tokens at [anchor, anchor+K): keep the first, mask the rest."""
    if anchor < 0 or anchor + K - 1 >= len(sequence):
        raise IndexError(
            f"block [{anchor}, {anchor + K}) out of range for sequence of {len(sequence)}"
        )
    slots = [sequence[anchor]] + [mask_token_id] * (K - 1)
    return CorruptedBlock(slots=slots, anchor_pos=anchor)


def build_diffusion_mask(L: int, anchors: AnchorSet) -> torch.Tensor:
    """Boolean [B*K, L + B*K] routing mask for the concatenated blocks.

    Entry (q, k) is true iff the key is clean context strictly before query
    q's anchor, or the key belongs to query q's own block.
    """
    B, K = anchors.n_blocks, anchors.block_len
    a = np.asarray(anchors.anchors)  # [B]
    q_block = np.repeat(np.arange(B), K)  # block index of each query row

    clean_cols = np.arange(L)
    clean = clean_cols[None, :] <= (a[q_block] - 1)[:, None]  # [B*K, L]

    block_cols = np.arange(B * K)
    own = (block_cols[None, :] // K) == q_block[:, None]  # [B*K, B*K]

    return torch.from_numpy(np.concatenate([clean, own], axis=1))


@dataclass
class TrainingBatch:
    """Everything one distillation step needs for a single packed sequence."""

    clean_tokens: list[int]
    block_tokens: list[int]  # B*K corrupted slots, blocks concatenated
    block_positions: list[int]  # absolute position of each slot
    mask: torch.Tensor  # [B*K, L + B*K]
    teacher_rows: list[int]  # slot (b, k) -> clean row a_b + k, whose AR output is its target
    hard_targets: list[int]  # next clean token per slot; -1 where it falls past the sequence
    supervised: list[bool]  # slots contributing to the loss (all, for anchor-only corruption)


def build_training_batch(
    sequence: list[int], anchors: AnchorSet, mask_token_id: int
) -> TrainingBatch:
    """Assemble the corrupted blocks, routing mask, and teacher-row index map.

    Slot k of block b (0-based k) sits at absolute position a_b + k and is
    matched with the AR output row at that same clean position, i.e. the
    teacher's distribution over the token at a_b + k + 1.
    """
    L = anchors.seq_len
    if len(sequence) != L:
        raise ValueError(f"sequence length {len(sequence)} != anchor set L={L}")
    K = anchors.block_len
    block_tokens: list[int] = []
    block_positions: list[int] = []
    teacher_rows: list[int] = []
    hard_targets: list[int] = []
    for a in anchors.anchors:
        blk = corrupt_block(sequence, a, K, mask_token_id)
        block_tokens.extend(blk.slots)
        for k in range(K):
            block_positions.append(a + k)
            teacher_rows.append(a + k)
            nxt = a + k + 1
            hard_targets.append(sequence[nxt] if nxt < L else -1)
    mask = build_diffusion_mask(L, anchors)
    supervised = [True] * len(block_tokens)
    return TrainingBatch(
        clean_tokens=list(sequence),
        block_tokens=block_tokens,
        block_positions=block_positions,
        mask=mask,
        teacher_rows=teacher_rows,
        hard_targets=hard_targets,
        supervised=supervised,
    )


def build_complementary_batch(
    sequence: list[int],
    anchors: AnchorSet,
    mask_token_id: int,
    rng: np.random.Generator,
) -> TrainingBatch:
    """Half-masked training batch for the two-pass denoising variant.

    Each anchor yields two views of its block: half of the non-anchor slots
    are masked in the first view and the complementary half in the second,
    so every slot is hidden exactly once. A row contributes to the loss only
    where its next slot is masked in that view (the final row, which predicts
    past the block's edge, is supervised in both). The views enter the batch
    as independent blocks, so the routing mask keeps them apart.
    """
    L = anchors.seq_len
    if len(sequence) != L:
        raise ValueError(f"sequence length {len(sequence)} != anchor set L={L}")
    K = anchors.block_len
    block_tokens: list[int] = []
    block_positions: list[int] = []
    teacher_rows: list[int] = []
    hard_targets: list[int] = []
    supervised: list[bool] = []
    doubled: list[int] = []
    for a in anchors.anchors:
        clean = sequence[a : a + K]
        maskable = list(range(1, K))
        hidden = set(rng.choice(maskable, size=K // 2, replace=False).tolist()) if K > 1 else set()
        for view_hidden in (hidden, set(maskable) - hidden):
            doubled.append(a)
            slots = [mask_token_id if k in view_hidden else clean[k] for k in range(K)]
            block_tokens.extend(slots)
            for k in range(K):
                block_positions.append(a + k)
                teacher_rows.append(a + k)
                nxt = a + k + 1
                hard_targets.append(sequence[nxt] if nxt < L else -1)
                supervised.append((k + 1) in view_hidden or k == K - 1)
    mask = build_diffusion_mask(L, AnchorSet(doubled, K, L))
    return TrainingBatch(
        clean_tokens=list(sequence),
        block_tokens=block_tokens,
        block_positions=block_positions,
        mask=mask,
        teacher_rows=teacher_rows,
        hard_targets=hard_targets,
        supervised=supervised,
    )
