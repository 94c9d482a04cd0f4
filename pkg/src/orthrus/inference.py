"""Two-pass parallel decoding with exact consensus against the AR view.

Each cycle costs exactly two forward passes. The diffusion view projects a
block of K candidate tokens from the last committed token (the anchor) plus
K-1 mask placeholders; the AR view then scores the anchor and all candidates
in one pass, which simultaneously fills the anchor's missing KV entry and
yields the exact target distribution for every candidate plus one bonus row.
Left-to-right consensus keeps the longest prefix that agrees with the AR
view (greedy argmax match at T=0, rejection sampling at T>0), commits it
together with a correction or bonus token, and truncates the shared cache to
exactly the committed history. The output therefore always matches plain
sequential decoding: wrong drafts cost speed, never correctness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .errors import LosslessnessViolationError
from .model import DualViewTransformer, ForwardOutput, SharedKVCache


@dataclass
class DecodeStats:
    """Pass and acceptance accounting for one generation run.

    ``generated_tokens`` counts tokens committed by draft/verify cycles (the
    token selected during prefill is part of the output but attributed to the
    prefill pass, which is tallied separately). Wall time is informational;
    pass counts are the hardware-agnostic metric.
    """

    generated_tokens: int = 0
    decode_forward_passes: int = 0
    prefill_passes: int = 0
    passes_by_view: dict[str, int] = field(default_factory=lambda: {"ar": 0, "diffusion": 0})
    acceptance_lengths: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    max_transient_elements: int = 0
    final_committed_elements: int = 0

    @property
    def cycles(self) -> int:
        return len(self.acceptance_lengths)

    @property
    def total_passes(self) -> int:
        return self.prefill_passes + self.decode_forward_passes


@dataclass
class GenerationResult:
    tokens: list[int]
    stats: DecodeStats


@dataclass
class DraftResult:
    """K candidate tokens and the diffusion rows they were selected from."""

    candidates: list[int]
    draft_dists: torch.Tensor  # [K, vocab+1] selection probabilities, mask column zero


@dataclass
class VerifyResult:
    """AR rows for anchor + candidates, plus the consensus outcome."""

    target_dists: torch.Tensor  # [K+1, vocab+1]
    accepted: int  # j - 1 drafted tokens kept
    correction_token: int
    j: int  # tokens committed this cycle, in [1, K+1]


@dataclass
class DecodeState:
    """A decode session: committed tokens, cache, and the pending token.

    The cache always trails the committed tokens by exactly one entry: the
    newest token (the correction or bonus of the previous cycle, or the first
    token picked at prefill) has no KV yet. The next verify pass computes it
    as a side effect of scoring the drafts.
    """

    tokens: list[int]
    cache: SharedKVCache
    pending_token: int
    pending_dist: torch.Tensor
    temperature: float
    rng: torch.Generator
    stats: DecodeStats = field(default_factory=DecodeStats)


def _argmax_first(row: torch.Tensor) -> int:
    """Argmax with the smallest index winning ties (both views must agree on this)."""
    return int((row == row.max()).nonzero(as_tuple=False)[0, 0])


def selection_probs(logits_row: torch.Tensor, temperature: float, mask_token_id: int) -> torch.Tensor:
    """Distribution a token is selected from: mask suppressed, temperature applied.

    At T=0 the returned row is the untempered softmax; selection then uses
    argmax, and the row is kept only for bookkeeping.
    """
    row = logits_row.clone()
    row[mask_token_id] = float("-inf")
    if temperature > 0:
        row = row / temperature
    return torch.softmax(row, dim=-1)


def select_token(probs: torch.Tensor, temperature: float, rng: torch.Generator) -> int:
    if temperature == 0:
        return _argmax_first(probs)
    return int(torch.multinomial(probs, 1, generator=rng))


@torch.no_grad()
def prefill(
    model: DualViewTransformer,
    prompt: list[int],
    temperature: float = 0.0,
    rng: torch.Generator | None = None,
    capacity: int | None = None,
) -> DecodeState:
    """Single AR pass over the prompt; selects and holds the first new token."""
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    cfg = model.config
    if len(prompt) > cfg.max_seq_len - 1:
        raise ValueError(f"prompt of {len(prompt)} tokens exceeds max_seq_len-1")
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    cache = SharedKVCache.for_model(cfg, capacity=capacity)
    out = model.ar_forward(prompt, cache, commit=True)
    dist = selection_probs(out.logits[-1], temperature, cfg.mask_token_id)
    first = select_token(dist, temperature, rng)
    state = DecodeState(
        tokens=list(prompt) + [first],
        cache=cache,
        pending_token=first,
        pending_dist=dist,
        temperature=temperature,
        rng=rng,
    )
    state.stats.prefill_passes = 1
    state.stats.passes_by_view["ar"] += 1
    return state


def _block_geometry(
    model: DualViewTransformer, state: DecodeState, K: int | None
) -> tuple[int, int, int] | None:
    """(anchor position, block length, candidate count) for the next cycle.

    The diffusion pass always runs at the trained block shape: the head only
    ever saw blocks of block_size_K slots, so a smaller inference K truncates
    the candidate list rather than shortening the mask block. The block does
    shrink at the context edge (positions must stay inside max_seq_len), and
    the candidate count is further capped by the cache room the verify pass
    needs: one slot per candidate plus one for the anchor. None ends
    generation.
    """
    cfg = model.config
    K = cfg.block_size_K if K is None else K
    if not (1 <= K <= cfg.block_size_K):
        raise ValueError(f"inference K={K} must lie in [1, {cfg.block_size_K}]")
    anchor_pos = state.cache.committed_len
    block_len = min(cfg.block_size_K, cfg.max_seq_len - anchor_pos)
    n_candidates = min(K, block_len, state.cache.capacity - anchor_pos - 1)
    if n_candidates <= 0:
        return None
    return anchor_pos, block_len, n_candidates


@torch.no_grad()
def draft_block(
    model: DualViewTransformer, state: DecodeState, K: int | None = None
) -> DraftResult | None:
    """One diffusion pass proposing up to K candidates; never touches the cache."""
    cfg = model.config
    geometry = _block_geometry(model, state, K)
    if geometry is None:
        return None
    anchor_pos, block_len, n_candidates = geometry
    block = [state.pending_token] + [cfg.mask_token_id] * (block_len - 1)
    positions = list(range(anchor_pos, anchor_pos + block_len))
    out = model.diffusion_forward(block, positions, state.cache)
    state.stats.decode_forward_passes += 1
    state.stats.passes_by_view["diffusion"] += 1
    state.stats.max_transient_elements = max(
        state.stats.max_transient_elements, out.transient_elements
    )
    return _select_candidates(out, state, cfg.mask_token_id, n_candidates)


def _select_candidates(
    out: ForwardOutput, state: DecodeState, mask_token_id: int, n_rows: int
) -> DraftResult:
    dists = torch.stack(
        [selection_probs(row, state.temperature, mask_token_id) for row in out.logits[:n_rows]]
    )
    candidates = [select_token(d, state.temperature, state.rng) for d in dists]
    assert all(c != mask_token_id for c in candidates)
    return DraftResult(candidates=candidates, draft_dists=dists)


def consensus_greedy(draft: DraftResult, target_dists: torch.Tensor) -> tuple[int, int]:
    """First index where the draft leaves the greedy AR path, and its correction.

    Returns (j, correction): drafted tokens before j are kept, the correction
    is committed at j. With no divergence, j = K+1 and the correction is the
    bonus token from the final row.
    """
    K = len(draft.candidates)
    for k in range(K):
        target = _argmax_first(target_dists[k])
        if draft.candidates[k] != target:
            return k + 1, target
    return K + 1, _argmax_first(target_dists[K])


def consensus_sampling(
    draft: DraftResult, target_dists: torch.Tensor, rng: torch.Generator
) -> tuple[int, int]:
    """Lossless stochastic acceptance of the drafted block.

    Candidate k survives with probability min(1, p_k(y)/q_k(y)); the first
    rejection commits a draw from the clipped residual norm(max(0, p - q)),
    and full acceptance commits a bonus draw from the final row. The
    committed marginal at every index is exactly the AR distribution.
    """
    K = len(draft.candidates)
    for k in range(K):
        y = draft.candidates[k]
        p = target_dists[k]
        q = draft.draft_dists[k]
        q_y = float(q[y])
        assert q_y > 0, "drafted token must carry draft probability"
        ratio = float(p[y]) / q_y
        if float(torch.rand((), generator=rng)) < min(1.0, ratio):
            continue
        residual = torch.clamp(p - q, min=0.0)
        total = float(residual.sum())
        if total <= 1e-12:
            # p and q numerically identical; the residual carries no signal
            correction = int(torch.multinomial(p, 1, generator=rng))
        else:
            correction = int(torch.multinomial(residual / total, 1, generator=rng))
        return k + 1, correction
    bonus = int(torch.multinomial(target_dists[K], 1, generator=rng))
    return K + 1, bonus


@torch.no_grad()
def verify_block(
    model: DualViewTransformer, state: DecodeState, draft: DraftResult
) -> VerifyResult:
    """Single AR pass over [anchor, candidates]; consensus, commit, truncate.

    The pass tentatively commits KV for all K+1 positions; after consensus
    picks j, the cache is cut back to the anchor plus the j-1 accepted drafts,
    and the correction (or bonus) becomes the new pending token.
    """
    cfg = model.config
    base_len = state.cache.committed_len
    verify_tokens = [state.pending_token] + draft.candidates
    out = model.ar_forward(verify_tokens, state.cache, commit=True)
    state.stats.decode_forward_passes += 1
    state.stats.passes_by_view["ar"] += 1
    target_dists = torch.stack(
        [selection_probs(row, state.temperature, cfg.mask_token_id) for row in out.logits]
    )
    if state.temperature == 0:
        j, correction = consensus_greedy(draft, target_dists)
    else:
        j, correction = consensus_sampling(draft, target_dists, state.rng)
    state.cache.truncate(base_len + j)
    state.tokens.extend(draft.candidates[: j - 1])
    state.tokens.append(correction)
    state.pending_token = correction
    state.pending_dist = target_dists[j - 1]
    return VerifyResult(
        target_dists=target_dists, accepted=j - 1, correction_token=correction, j=j
    )


def _trim_cycle(state: DecodeState, cycle_tokens: list[int], keep: int, base_len: int) -> None:
    """Drop cycle tokens past the budget or past an end-of-sequence token."""
    drop = len(cycle_tokens) - keep
    del state.tokens[len(state.tokens) - drop :]
    state.cache.truncate(base_len + keep)
    state.pending_token = state.tokens[-1]


def _effective_commit(cycle_tokens: list[int], budget: int, eos: int | None) -> int:
    keep = min(len(cycle_tokens), budget)
    if eos is not None and eos in cycle_tokens[:keep]:
        keep = cycle_tokens.index(eos) + 1
    return keep


@torch.no_grad()
def generate(
    model: DualViewTransformer,
    prompt: list[int],
    max_new_tokens: int,
    temperature: float = 0.0,
    seed: int = 0,
    K: int | None = None,
    eos_token_id: int | None = None,
) -> GenerationResult:
    """Full decode loop: prefill, then draft/verify cycles until the budget.

    The final cycle is trimmed so the output never exceeds ``max_new_tokens``
    and never continues past an end-of-sequence token; trimmed tokens are
    excluded from the throughput numerator.
    """
    t0 = time.perf_counter()
    if max_new_tokens == 0:
        return GenerationResult(tokens=list(prompt), stats=DecodeStats())
    rng = torch.Generator().manual_seed(seed)
    state = prefill(model, prompt, temperature, rng)
    produced = 1
    if not (eos_token_id is not None and state.pending_token == eos_token_id):
        while produced < max_new_tokens:
            draft = draft_block(model, state, K)
            if draft is None:
                break
            base_len = state.cache.committed_len
            result = verify_block(model, state, draft)
            cycle_tokens = state.tokens[len(state.tokens) - result.j :]
            keep = _effective_commit(cycle_tokens, max_new_tokens - produced, eos_token_id)
            if keep < result.j:
                _trim_cycle(state, cycle_tokens, keep, base_len)
                state.pending_dist = result.target_dists[keep - 1]
            state.stats.acceptance_lengths.append(keep)
            state.stats.generated_tokens += keep
            produced += keep
            if eos_token_id is not None and state.tokens[-1] == eos_token_id:
                break
    state.stats.wall_time = time.perf_counter() - t0
    state.stats.final_committed_elements = state.cache.element_count()
    return GenerationResult(tokens=state.tokens, stats=state.stats)


@torch.no_grad()
def generate_ar_baseline(
    model: DualViewTransformer,
    prompt: list[int],
    max_new_tokens: int,
    temperature: float = 0.0,
    seed: int = 0,
    eos_token_id: int | None = None,
) -> GenerationResult:
    """Plain sequential decoding: one forward pass per generated token."""
    t0 = time.perf_counter()
    if max_new_tokens == 0:
        return GenerationResult(tokens=list(prompt), stats=DecodeStats())
    rng = torch.Generator().manual_seed(seed)
    state = prefill(model, prompt, temperature, rng)
    produced = 1
    cfg = model.config
    while produced < max_new_tokens:
        if eos_token_id is not None and state.pending_token == eos_token_id:
            break
        if state.cache.committed_len + 1 > state.cache.capacity:
            break
        out = model.ar_forward([state.pending_token], state.cache, commit=True)
        state.stats.decode_forward_passes += 1
        state.stats.passes_by_view["ar"] += 1
        dist = selection_probs(out.logits[-1], temperature, cfg.mask_token_id)
        nxt = select_token(dist, temperature, rng)
        state.tokens.append(nxt)
        state.pending_token = nxt
        state.pending_dist = dist
        state.stats.acceptance_lengths.append(1)
        state.stats.generated_tokens += 1
        produced += 1
    state.stats.wall_time = time.perf_counter() - t0
    state.stats.final_committed_elements = state.cache.element_count()
    return GenerationResult(tokens=state.tokens, stats=state.stats)


@torch.no_grad()
def draft_block_multistep(
    model: DualViewTransformer, state: DecodeState, K: int | None = None
) -> DraftResult | None:
    """Two-pass block drafting: predict all slots, keep the confident half, refill.

    The first pass drafts every slot; the most confident half of the
    in-block candidates are written back as real tokens and a second pass
    re-predicts the rest conditioned on them. Each candidate keeps the row it
    was actually drawn from, so verification stays lossless. Costs two
    diffusion passes instead of one.
    """
    cfg = model.config
    mask_id = cfg.mask_token_id
    geometry = _block_geometry(model, state, K)
    if geometry is None:
        return None
    anchor_pos, block_len, n_candidates = geometry
    positions = list(range(anchor_pos, anchor_pos + block_len))

    block1 = [state.pending_token] + [mask_id] * (block_len - 1)
    out1 = model.diffusion_forward(block1, positions, state.cache)
    first = _select_candidates(out1, state, mask_id, block_len)
    state.stats.decode_forward_passes += 1
    state.stats.passes_by_view["diffusion"] += 1
    state.stats.max_transient_elements = max(
        state.stats.max_transient_elements, out1.transient_elements
    )

    # candidate k fills block slot k+1; the last candidate lands past the block
    placeable = list(range(block_len - 1))
    confidence = [float(first.draft_dists[k][first.candidates[k]]) for k in placeable]
    n_keep = min(-(-block_len // 2), len(placeable))
    retained = set(sorted(placeable, key=lambda k: (-confidence[k], k))[:n_keep])

    block2 = list(block1)
    for k in retained:
        block2[k + 1] = first.candidates[k]
    out2 = model.diffusion_forward(block2, positions, state.cache)
    second = _select_candidates(out2, state, mask_id, n_candidates)
    state.stats.decode_forward_passes += 1
    state.stats.passes_by_view["diffusion"] += 1
    state.stats.max_transient_elements = max(
        state.stats.max_transient_elements, out2.transient_elements
    )

    candidates = [
        first.candidates[k] if k in retained else second.candidates[k]
        for k in range(n_candidates)
    ]
    dists = torch.stack(
        [
            first.draft_dists[k] if k in retained else second.draft_dists[k]
            for k in range(n_candidates)
        ]
    )
    return DraftResult(candidates=candidates, draft_dists=dists)


@torch.no_grad()
def generate_multistep_variant(
    model: DualViewTransformer,
    prompt: list[int],
    max_new_tokens: int,
    temperature: float = 0.0,
    seed: int = 0,
    K: int | None = None,
    eos_token_id: int | None = None,
) -> GenerationResult:
    """Decode loop using two-pass drafting; three forward passes per cycle.

    Verification is unchanged, so greedy output still matches the sequential
    baseline exactly. Intended for a head trained with complementary
    half-masking.
    """
    t0 = time.perf_counter()
    if max_new_tokens == 0:
        return GenerationResult(tokens=list(prompt), stats=DecodeStats())
    rng = torch.Generator().manual_seed(seed)
    state = prefill(model, prompt, temperature, rng)
    produced = 1
    if not (eos_token_id is not None and state.pending_token == eos_token_id):
        while produced < max_new_tokens:
            draft = draft_block_multistep(model, state, K)
            if draft is None:
                break
            base_len = state.cache.committed_len
            result = verify_block(model, state, draft)
            cycle_tokens = state.tokens[len(state.tokens) - result.j :]
            keep = _effective_commit(cycle_tokens, max_new_tokens - produced, eos_token_id)
            if keep < result.j:
                _trim_cycle(state, cycle_tokens, keep, base_len)
                state.pending_dist = result.target_dists[keep - 1]
            state.stats.acceptance_lengths.append(keep)
            state.stats.generated_tokens += keep
            produced += keep
            if eos_token_id is not None and state.tokens[-1] == eos_token_id:
                break
    state.stats.wall_time = time.perf_counter() - t0
    state.stats.final_committed_elements = state.cache.element_count()
    return GenerationResult(tokens=state.tokens, stats=state.stats)


def assert_matches_baseline(
    orthrus: GenerationResult, baseline: GenerationResult, context: str = ""
) -> None:
    """Hard failure if greedy accelerated output deviates from the baseline."""
    if orthrus.tokens != baseline.tokens:
        raise LosslessnessViolationError(
            f"accelerated output diverged from the sequential baseline {context}: "
            f"{orthrus.tokens} vs {baseline.tokens}"
        )
