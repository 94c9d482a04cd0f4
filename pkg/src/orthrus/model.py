"""Dual-view decoder-only transformer over a single shared KV cache.

Every layer carries two parallel attention paths:

* a frozen autoregressive (AR) path that writes the committed KV cache and
  produces exact next-token distributions, and
* a trainable diffusion path whose queries attend jointly over the frozen
  cache and the transient key/values of a parallel block (an anchor token
  followed by mask placeholders), predicting several future tokens at once.

Only the per-layer diffusion Q/K/V projections and the mask-token embedding
are trainable; MLPs, norms, the attention output projection, the token
embedding, and the LM head are shared with (and frozen alongside) the AR
backbone. The diffusion path never writes to the cache.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import (
    BlockSizeError,
    CacheOverflowError,
    InvalidTokenError,
    StaleCacheError,
    TruncationError,
)

# Parameter names matching any of these substrings form the trainable subset;
# everything else is the frozen AR backbone.
_TRAINABLE_MARKERS = ("q_diff", "k_diff", "v_diff", "mask_embed")


def is_trainable_name(name: str) -> bool:
    return any(marker in name for marker in _TRAINABLE_MARKERS)


class SharedKVCache:
    """Per-layer key/value store of committed positions.

    Written exactly once per position, only by the AR path. The diffusion
    path reads it but never appends, so the cache footprint is identical to
    plain sequential decoding: 2 * committed_len * d_model elements per layer.
    """

    def __init__(
        self,
        n_layers: int,
        capacity: int,
        n_heads: int,
        d_head: int,
        dtype: torch.dtype = torch.float32,
    ):
        self.k = torch.zeros(n_layers, capacity, n_heads, d_head, dtype=dtype)
        self.v = torch.zeros(n_layers, capacity, n_heads, d_head, dtype=dtype)
        self.committed_len = 0
        self.capacity = capacity

    @classmethod
    def for_model(
        cls,
        config: ModelConfig,
        capacity: int | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> "SharedKVCache":
        cap = config.max_seq_len if capacity is None else capacity
        return cls(config.n_layers, cap, config.n_heads, config.d_head, dtype=dtype)

    def layer_view(self, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Committed keys/values of one layer, shape [committed_len, H, Dh]."""
        n = self.committed_len
        return self.k[layer, :n], self.v[layer, :n]

    def append(self, layer_keys: list[torch.Tensor], layer_values: list[torch.Tensor]) -> None:
        n_new = layer_keys[0].shape[0]
        if self.committed_len + n_new > self.capacity:
            raise CacheOverflowError(
                f"cannot commit {n_new} positions at {self.committed_len}/{self.capacity}"
            )
        lo, hi = self.committed_len, self.committed_len + n_new
        for layer, (k_new, v_new) in enumerate(zip(layer_keys, layer_values)):
            self.k[layer, lo:hi] = k_new.detach()
            self.v[layer, lo:hi] = v_new.detach()
        self.committed_len = hi

    def truncate(self, new_len: int) -> None:
        """Drop entries at positions >= new_len; later slots are invalidated."""
        if new_len > self.committed_len:
            raise TruncationError(
                f"truncate to {new_len} exceeds committed_len {self.committed_len}"
            )
        self.committed_len = new_len

    def element_count(self) -> int:
        """Total committed cache elements across layers (keys plus values)."""
        n_layers, _, n_heads, d_head = self.k.shape
        return n_layers * 2 * self.committed_len * n_heads * d_head

    def clone(self) -> "SharedKVCache":
        n_layers, capacity, n_heads, d_head = self.k.shape
        out = SharedKVCache(n_layers, capacity, n_heads, d_head, dtype=self.k.dtype)
        out.k = self.k.clone()
        out.v = self.v.clone()
        out.committed_len = self.committed_len
        return out


def cache_truncate(cache: SharedKVCache, new_len: int) -> SharedKVCache:
    """Truncate the committed region to ``new_len`` entries (in place)."""
    cache.truncate(new_len)
    return cache


@dataclass
class ForwardOutput:
    """One logits row per input position; row i scores the token after position i."""

    logits: torch.Tensor  # [T, vocab_size + 1]
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer, if collected
    transient_elements: int = 0  # diffusion-path scratch K/V + logits element count


def _rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary position encoding at absolute positions.

    x: [..., T, H, Dh] with Dh even; positions: [T].
    """
    d_head = x.shape[-1]
    half = d_head // 2
    inv_freq = base ** (-torch.arange(half, dtype=x.dtype) * 2.0 / d_head)
    angles = positions.to(x.dtype)[:, None] * inv_freq[None, :]  # [T, half]
    cos = angles.cos()[:, None, :]  # [T, 1, half] broadcast over heads
    sin = angles.sin()[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def causal_attention_mask(n_queries: int, cache_len: int) -> torch.Tensor:
    """Boolean [n_queries, cache_len + n_queries] mask: full cache + lower triangle."""
    mask = torch.zeros(n_queries, cache_len + n_queries, dtype=torch.bool)
    mask[:, :cache_len] = True
    mask[:, cache_len:] = torch.tril(torch.ones(n_queries, n_queries, dtype=torch.bool))
    return mask


class DualViewBlock(nn.Module):
    """Transformer layer with parallel AR and diffusion attention projections."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.ln_attn = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.q_diff = nn.Linear(d, d, bias=False)
        self.k_diff = nn.Linear(d, d, bias=False)
        self.v_diff = nn.Linear(d, d, bias=False)
        self.out_proj = nn.Linear(d, d, bias=False)
        self.ln_mlp = nn.LayerNorm(d)
        self.fc_in = nn.Linear(d, 4 * d)
        self.fc_out = nn.Linear(4 * d, d)


class DualViewTransformer(nn.Module):
    """Decoder-only transformer exposing both attention views.

    The frozen subset ("ar." prefix in checkpoints) is the token embedding,
    per-layer AR projections, output projections, MLPs, norms, and the LM
    head. The trainable subset ("diff." prefix) is the per-layer diffusion
    Q/K/V projections plus the mask-token embedding.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_embed = nn.Embedding(config.vocab_size, d)
        self.mask_embed = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(DualViewBlock(config) for _ in range(config.n_layers))
        self.ln_final = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size + 1, bias=False)
        self.sealed = False
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=gen)
                elif "ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    # ------------------------------------------------------------------
    # Embedding
    # ------------------------------------------------------------------

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """Token embedding with the reserved mask id routed to its own vector."""
        mask_id = self.config.mask_token_id
        is_mask = tokens == mask_id
        clamped = torch.where(is_mask, torch.zeros_like(tokens), tokens)
        base = self.tok_embed(clamped)
        return torch.where(is_mask.unsqueeze(-1), self.mask_embed.expand_as(base), base)

    # ------------------------------------------------------------------
    # Shared layer stack
    # ------------------------------------------------------------------

    def _run_layers(
        self,
        x: torch.Tensor,  # [B, T, D]
        positions: torch.Tensor,  # [T]
        attn_mask: torch.Tensor,  # [T, Tk] boolean, Tk = cache_len + T
        cache: SharedKVCache | None,
        use_diff: bool,
        collect_attn: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor], list[torch.Tensor]]:
        cfg = self.config
        B, T, _ = x.shape
        H, Dh = cfg.n_heads, cfg.d_head
        if cache is not None and B != 1:
            raise ValueError("cached forward supports a single sequence only")
        additive = torch.where(
            attn_mask, torch.zeros((), dtype=x.dtype), torch.full((), float("-inf"), dtype=x.dtype)
        )

        new_keys: list[torch.Tensor] = []
        new_values: list[torch.Tensor] = []
        attn_maps: list[torch.Tensor] = []
        scale = 1.0 / math.sqrt(Dh)

        for layer_idx, blk in enumerate(self.blocks):
            h = blk.ln_attn(x)
            if use_diff:
                q = blk.q_diff(h).view(B, T, H, Dh)
                k = blk.k_diff(h).view(B, T, H, Dh)
                v = blk.v_diff(h).view(B, T, H, Dh)
            else:
                q = blk.q_proj(h).view(B, T, H, Dh)
                k = blk.k_proj(h).view(B, T, H, Dh)
                v = blk.v_proj(h).view(B, T, H, Dh)
            q = _rope(q, positions, cfg.rope_base)
            k = _rope(k, positions, cfg.rope_base)

            if cache is not None:
                ck, cv = cache.layer_view(layer_idx)
                k_all = torch.cat([ck.unsqueeze(0), k], dim=1)
                v_all = torch.cat([cv.unsqueeze(0), v], dim=1)
            else:
                k_all, v_all = k, v

            scores = torch.einsum("bqhd,bkhd->bhqk", q, k_all) * scale
            scores = scores + additive  # dense additive -inf mask, no fused kernels
            weights = F.softmax(scores, dim=-1)
            if collect_attn:
                attn_maps.append(weights.detach().squeeze(0))
            out = torch.einsum("bhqk,bkhd->bqhd", weights, v_all).reshape(B, T, cfg.d_model)
            x = x + blk.out_proj(out)
            x = x + blk.fc_out(F.gelu(blk.fc_in(blk.ln_mlp(x))))

            new_keys.append(k.squeeze(0))
            new_values.append(v.squeeze(0))

        x = self.ln_final(x)
        return x, new_keys, new_values, attn_maps

    # ------------------------------------------------------------------
    # AR view
    # ------------------------------------------------------------------

    def _check_ar_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.numel() == 0:
            raise InvalidTokenError("empty token sequence")
        if bool((tokens < 0).any()) or bool((tokens > self.config.vocab_size).any()):
            raise InvalidTokenError("token id outside the vocabulary")
        if bool((tokens == self.config.mask_token_id).any()):
            raise InvalidTokenError("mask token is not a legal AR input")

    def ar_forward(
        self,
        tokens: torch.Tensor | list[int],
        cache: SharedKVCache,
        commit: bool = False,
        collect_attn: bool = False,
    ) -> ForwardOutput:
        """Causal forward of new tokens against the committed cache.

        Row i of the result scores the token following absolute position
        ``cache.committed_len + i``. With ``commit`` set, KV entries for all
        input positions are appended and the committed length advances.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        self._check_ar_tokens(tokens)
        T = tokens.shape[0]
        if cache.committed_len + T > cache.capacity:
            raise CacheOverflowError(
                f"{T} new tokens exceed capacity {cache.capacity} "
                f"(committed {cache.committed_len})"
            )
        positions = torch.arange(cache.committed_len, cache.committed_len + T)
        mask = causal_attention_mask(T, cache.committed_len)
        x = self.embed(tokens).unsqueeze(0)
        x, new_k, new_v, attn = self._run_layers(
            x, positions, mask, cache, use_diff=False, collect_attn=collect_attn
        )
        logits = self.lm_head(x).squeeze(0)
        if commit:
            cache.append(new_k, new_v)
        return ForwardOutput(logits=logits, attention=attn)

    def causal_forward_batch(self, tokens: torch.Tensor) -> torch.Tensor:
        """Batched cache-free causal forward for training; returns [B, T, V+1]."""
        B, T = tokens.shape
        positions = torch.arange(T)
        mask = causal_attention_mask(T, 0)
        x = self.embed(tokens)
        x, _, _, _ = self._run_layers(x, positions, mask, cache=None, use_diff=False)
        return self.lm_head(x)

    # ------------------------------------------------------------------
    # Diffusion view
    # ------------------------------------------------------------------

    def diffusion_forward_masked(
        self,
        tokens: torch.Tensor | list[int],
        positions: torch.Tensor | list[int],
        cache: SharedKVCache,
        attn_mask: torch.Tensor,
        collect_attn: bool = False,
    ) -> ForwardOutput:
        """Diffusion-path forward of block tokens under an explicit routing mask.

        ``attn_mask`` is boolean [N, cache.committed_len + N]: clean-context
        keys first, then the block's own transient keys. Used directly by
        training (several concatenated blocks, one structured mask) and by
        the single-block wrapper below. Never writes to the cache.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        positions = torch.as_tensor(positions, dtype=torch.long)
        N = tokens.shape[0]
        expected = (N, cache.committed_len + N)
        if tuple(attn_mask.shape) != expected:
            raise ValueError(f"attention mask shape {tuple(attn_mask.shape)} != {expected}")
        if not bool(attn_mask.any(dim=1).all()):
            raise ValueError("attention mask has an all-false row")
        x = self.embed(tokens).unsqueeze(0)
        x, new_k, new_v, attn = self._run_layers(
            x, positions, attn_mask, cache, use_diff=True, collect_attn=collect_attn
        )
        logits = self.lm_head(x).squeeze(0)
        transient = sum(k.numel() + v.numel() for k, v in zip(new_k, new_v)) + logits.numel()
        return ForwardOutput(logits=logits, attention=attn, transient_elements=transient)

    def diffusion_forward(
        self,
        block_tokens: torch.Tensor | list[int],
        block_positions: torch.Tensor | list[int],
        cache: SharedKVCache,
        intra_block_mask: torch.Tensor | None = None,
        collect_attn: bool = False,
    ) -> ForwardOutput:
        """Single-block diffusion forward for decoding.

        The block (anchor plus masks) sits at consecutive positions starting
        where the committed cache ends; its queries see the whole cache and,
        within the block, whatever ``intra_block_mask`` permits (default:
        fully bidirectional). Row k scores the token at anchor position + k + 1.
        """
        block_tokens = torch.as_tensor(block_tokens, dtype=torch.long)
        block_positions = torch.as_tensor(block_positions, dtype=torch.long)
        N = block_tokens.shape[0]
        if N > self.config.block_size_K:
            raise BlockSizeError(f"block of {N} exceeds block_size_K={self.config.block_size_K}")
        if N == 0:
            raise BlockSizeError("empty block")
        anchor_pos = int(block_positions[0])
        if bool((block_positions != torch.arange(anchor_pos, anchor_pos + N)).any()):
            raise StaleCacheError("block positions must be consecutive from the anchor")
        if cache.committed_len != anchor_pos:
            raise StaleCacheError(
                f"cache holds {cache.committed_len} positions, anchor at {anchor_pos}"
            )
        if intra_block_mask is None:
            intra = torch.ones(N, N, dtype=torch.bool)
        else:
            intra = intra_block_mask.to(torch.bool)
            if tuple(intra.shape) != (N, N):
                raise ValueError(f"intra_block_mask shape {tuple(intra.shape)} != {(N, N)}")
        mask = torch.cat([torch.ones(N, cache.committed_len, dtype=torch.bool), intra], dim=1)
        return self.diffusion_forward_masked(
            block_tokens, block_positions, cache, mask, collect_attn=collect_attn
        )


# ----------------------------------------------------------------------
# Parameter partition helpers
# ----------------------------------------------------------------------


def trainable_parameters(model: DualViewTransformer) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if is_trainable_name(n)]


def frozen_parameters(model: DualViewTransformer) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if not is_trainable_name(n)]


def trainable_fraction(model: DualViewTransformer) -> tuple[int, float]:
    """(trainable parameter count, fraction of all parameters)."""
    train = sum(p.numel() for _, p in trainable_parameters(model))
    total = sum(p.numel() for p in model.parameters())
    return train, train / total


def seal_backbone(model: DualViewTransformer) -> None:
    """Freeze the AR subset; call once when pretraining finishes."""
    for _, p in frozen_parameters(model):
        p.requires_grad_(False)
    model.sealed = True


def backbone_checksum(model: DualViewTransformer) -> str:
    """SHA-256 over the frozen tensors; stable iff the backbone is untouched."""
    h = hashlib.sha256()
    for name, p in sorted(frozen_parameters(model)):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def init_diffusion_from_ar(model: DualViewTransformer) -> DualViewTransformer:
    """Copy each AR Q/K/V projection into its diffusion twin.

    The mask-token embedding starts at the mean of the frozen token
    embeddings so the new symbol lands inside the activation distribution.
    """
    with torch.no_grad():
        for blk in model.blocks:
            blk.q_diff.weight.copy_(blk.q_proj.weight)
            blk.k_diff.weight.copy_(blk.k_proj.weight)
            blk.v_diff.weight.copy_(blk.v_proj.weight)
        model.mask_embed.copy_(model.tok_embed.weight.mean(dim=0))
    return model
