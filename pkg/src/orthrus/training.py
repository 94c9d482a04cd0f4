"""Backbone pretraining, diffusion-head distillation, and gradient checking.

Pretraining minimizes next-token negative log-likelihood and then seals the
backbone. Distillation runs two passes per sequence: a frozen AR pass over
the clean tokens that yields both the shared KV cache and the full teacher
distributions, then one diffusion pass over all corrupted blocks under the
structured routing mask. The loss matches the student rows against their
teacher rows (forward KL by default, hard-label cross-entropy as a variant)
and only the diffusion projections and mask embedding receive gradients.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import Corpus, pack_sequences
from .errors import DivergenceError
from .masking import (
    AnchorSet,
    build_complementary_batch,
    build_training_batch,
    sample_anchors,
)
from .model import (
    DualViewTransformer,
    SharedKVCache,
    backbone_checksum,
    frozen_parameters,
    seal_backbone,
    trainable_fraction,
    trainable_parameters,
)


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    trainable_params: int = 0
    trainable_fraction: float = 0.0
    tokens_consumed: int = 0


def smoothed_monotone_decrease(
    losses: list[float], window: int = 50, rel_tol: float = 0.05
) -> bool:
    """True if the moving-average loss curve only ever moves down.

    The smoothed curve may never rise more than ``rel_tol`` times its total
    range above its running minimum. Window means wander a few percent of
    the range from batch composition alone (shuffled sequences differ in
    difficulty), while a real trend reversal accumulates far past the
    allowance.
    """
    if len(losses) < window + 1:
        raise ValueError(f"need more than {window} recorded steps, got {len(losses)}")
    kernel = np.ones(window) / window
    smooth = np.convolve(np.asarray(losses, dtype=np.float64), kernel, mode="valid")
    allowance = rel_tol * (smooth.max() - smooth.min())
    running_min = np.minimum.accumulate(smooth)
    return bool((smooth - running_min <= allowance).all())


def cosine_lr(step: int, total_steps: int, peak: float, warmup_ratio: float) -> float:
    """Linear warmup to the peak rate, then a cosine decay to zero."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return peak * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def kl_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Sum over paired rows of KL(teacher || student), in log space.

    Teacher rows are detached constants; gradients reach the student only.
    Log-sum-exp normalization keeps zero student mass from producing log(0).
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"row shape mismatch: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    log_p = F.log_softmax(teacher_logits.detach(), dim=-1)
    log_q = F.log_softmax(student_logits, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum()


def ce_loss_variant(hard_targets: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the hard target tokens under the student."""
    return F.cross_entropy(student_logits, hard_targets.long(), reduction="mean")


class _MetricsWriter:
    """Line-delimited (step, loss, lr, grad_norm) records, one per optimizer step."""

    def __init__(self, path: str | None):
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        if self._fh is None:
            return
        self._fh.write(
            json.dumps({"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm}) + "\n"
        )
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _check_loss_finite(loss: torch.Tensor, step: int, lr: float) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"loss became non-finite at step {step} (lr={lr:.3g})")


def ar_pretrain(model: DualViewTransformer, corpus: Corpus, config: TrainConfig) -> TrainReport:
    """Train the AR backbone on packed sequences, then seal it.

    Loss is next-token negative log-likelihood in nats per token, so the
    converged value is comparable to the source's conditional entropy.
    """
    if model.sealed:
        raise ValueError("backbone already sealed")
    sep = _separator_id(model, config)
    packed = pack_sequences(corpus, config.seq_len_L, sep, config.seed)
    if not packed.sequences:
        raise ValueError("corpus packs to zero sequences at this length")
    seqs = torch.tensor(packed.sequences, dtype=torch.long)

    params = [p for _, p in frozen_parameters(model)]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.0)
    micro = config.micro_batch
    micros_per_step = config.grad_accum
    micros_per_epoch = math.ceil(len(seqs) / micro)
    total_steps = config.epochs * math.ceil(micros_per_epoch / micros_per_step)

    report = TrainReport()
    metrics = _MetricsWriter(config.metrics_path)
    step = 0
    vocab_cols = model.config.vocab_size + 1
    try:
        for epoch in range(config.epochs):
            order = torch.from_numpy(
                np.random.default_rng(config.seed + epoch).permutation(len(seqs))
            )
            micro_losses: list[float] = []
            opt.zero_grad(set_to_none=True)
            for mb_idx in range(micros_per_epoch):
                batch = seqs[order[mb_idx * micro : (mb_idx + 1) * micro]]
                logits = model.causal_forward_batch(batch)
                loss = F.cross_entropy(
                    logits[:, :-1].reshape(-1, vocab_cols), batch[:, 1:].reshape(-1)
                )
                lr = cosine_lr(step, total_steps, config.learning_rate, config.warmup_ratio)
                _check_loss_finite(loss, step, lr)
                (loss / micros_per_step).backward()
                micro_losses.append(float(loss.detach()))
                report.tokens_consumed += batch.numel()
                if (mb_idx + 1) % micros_per_step == 0 or mb_idx == micros_per_epoch - 1:
                    for g in opt.param_groups:
                        g["lr"] = lr
                    grad_norm = float(
                        torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
                    )
                    opt.step()
                    opt.zero_grad(set_to_none=True)
                    step_loss = float(np.mean(micro_losses))
                    micro_losses = []
                    report.step_losses.append(step_loss)
                    metrics.write(step, step_loss, lr, grad_norm)
                    step += 1
    finally:
        metrics.close()

    seal_backbone(model)
    report.final_loss = report.step_losses[-1]
    report.trainable_params, report.trainable_fraction = trainable_fraction(model)
    return report


def _separator_id(model: DualViewTransformer, config: TrainConfig) -> int:
    if config.separator_token_id is not None:
        return config.separator_token_id
    return model.config.vocab_size - 1


def _distill_sequence_loss(
    model: DualViewTransformer,
    sequence: list[int],
    anchors: AnchorSet,
    config: TrainConfig,
    block_rng: np.random.Generator,
) -> torch.Tensor:
    """Teacher pass (cached, no grad) plus one masked diffusion pass; per-slot loss."""
    mask_id = model.config.mask_token_id
    if config.block_masking == "anchor_only":
        batch = build_training_batch(sequence, anchors, mask_id)
    else:
        batch = build_complementary_batch(sequence, anchors, mask_id, block_rng)

    dtype = next(model.parameters()).dtype
    cache = SharedKVCache.for_model(model.config, capacity=len(sequence), dtype=dtype)
    with torch.no_grad():
        teacher = model.ar_forward(sequence, cache, commit=True)
    student = model.diffusion_forward_masked(
        batch.block_tokens, batch.block_positions, cache, batch.mask
    )
    sup = torch.tensor(batch.supervised, dtype=torch.bool)
    teacher_rows = teacher.logits[torch.tensor(batch.teacher_rows)]
    if config.objective == "forward_kl":
        n = int(sup.sum())
        return kl_loss(teacher_rows[sup], student.logits[sup]) / n
    targets = torch.tensor(batch.hard_targets)
    valid = sup & (targets >= 0)
    return ce_loss_variant(targets[valid], student.logits[valid])


def distill(model: DualViewTransformer, corpus: Corpus, config: TrainConfig) -> TrainReport:
    """Distill the diffusion head against the sealed backbone for config.epochs."""
    if not model.sealed:
        raise ValueError("seal the backbone before distillation")
    sep = _separator_id(model, config)
    packed = pack_sequences(corpus, config.seq_len_L, sep, config.seed)
    if not packed.sequences:
        raise ValueError("corpus packs to zero sequences at this length")
    sequences = packed.sequences

    params = [p for _, p in trainable_parameters(model)]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.0)
    micro = config.micro_batch
    micros_per_step = config.grad_accum
    micros_per_epoch = math.ceil(len(sequences) / micro)
    total_steps = config.epochs * math.ceil(micros_per_epoch / micros_per_step)

    report = TrainReport()
    metrics = _MetricsWriter(config.metrics_path)
    frozen_before = backbone_checksum(model)
    step = 0
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng(config.seed + epoch)
            order = rng.permutation(len(sequences))
            block_rng = np.random.default_rng(config.seed * 7919 + epoch)
            micro_losses: list[float] = []
            opt.zero_grad(set_to_none=True)
            for mb_idx in range(micros_per_epoch):
                idxs = order[mb_idx * micro : (mb_idx + 1) * micro]
                mb_loss = torch.zeros(())
                for j, seq_idx in enumerate(idxs):
                    seq = sequences[int(seq_idx)]
                    anchor_seed = int(
                        np.random.SeedSequence(
                            [config.seed, epoch, int(seq_idx)]
                        ).generate_state(1)[0]
                    )
                    anchors = sample_anchors(
                        len(seq), config.B_blocks_per_seq, model.config.block_size_K, anchor_seed
                    )
                    mb_loss = mb_loss + _distill_sequence_loss(
                        model, seq, anchors, config, block_rng
                    )
                    report.tokens_consumed += len(seq)
                mb_loss = mb_loss / len(idxs)
                lr = cosine_lr(step, total_steps, config.learning_rate, config.warmup_ratio)
                _check_loss_finite(mb_loss, step, lr)
                (mb_loss / micros_per_step).backward()
                micro_losses.append(float(mb_loss.detach()))
                if (mb_idx + 1) % micros_per_step == 0 or mb_idx == micros_per_epoch - 1:
                    for g in opt.param_groups:
                        g["lr"] = lr
                    grad_norm = float(
                        torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
                    )
                    opt.step()
                    opt.zero_grad(set_to_none=True)
                    step_loss = float(np.mean(micro_losses))
                    micro_losses = []
                    report.step_losses.append(step_loss)
                    metrics.write(step, step_loss, lr, grad_norm)
                    step += 1
                    _maybe_checkpoint(model, config, step)
            assert backbone_checksum(model) == frozen_before, "frozen backbone was mutated"
    finally:
        metrics.close()

    report.final_loss = report.step_losses[-1]
    report.trainable_params, report.trainable_fraction = trainable_fraction(model)
    return report


def distill_epoch(model: DualViewTransformer, corpus: Corpus, config: TrainConfig) -> TrainReport:
    """One distillation pass over the packed corpus."""
    one = TrainConfig(**{**config.to_dict(), "epochs": 1})
    return distill(model, corpus, one)


def _maybe_checkpoint(model: DualViewTransformer, config: TrainConfig, step: int) -> None:
    if not config.checkpoint_dir or config.checkpoint_interval <= 0:
        return
    if step % config.checkpoint_interval == 0:
        from .checkpoint import save_checkpoint

        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / f"step{step:06d}.orth")


def held_out_kl(model: DualViewTransformer, corpus: Corpus, config: TrainConfig) -> float:
    """Mean per-slot KL of the distilled head on freshly packed held-out text."""
    sep = _separator_id(model, config)
    packed = pack_sequences(corpus, config.seq_len_L, sep, config.seed + 1)
    total, n_rows = 0.0, 0
    with torch.no_grad():
        for i, seq in enumerate(packed.sequences):
            anchors = sample_anchors(
                len(seq), config.B_blocks_per_seq, model.config.block_size_K, config.seed + i
            )
            batch = build_training_batch(seq, anchors, model.config.mask_token_id)
            cache = SharedKVCache.for_model(model.config, capacity=len(seq))
            teacher = model.ar_forward(seq, cache, commit=True)
            student = model.diffusion_forward_masked(
                batch.block_tokens, batch.block_positions, cache, batch.mask
            )
            rows = teacher.logits[torch.tensor(batch.teacher_rows)]
            total += float(kl_loss(rows, student.logits))
            n_rows += len(batch.teacher_rows)
    return total / max(1, n_rows)


# ----------------------------------------------------------------------
# Finite-difference gradient harness
# ----------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: dict[str, float]
    frozen_grads_absent: bool
    epsilon: float


def grad_check(
    model: DualViewTransformer,
    sequence: list[int],
    anchors: AnchorSet,
    epsilon: float = 1e-3,
    coords_per_tensor: int = 64,
    seed: int = 0,
    objective: str = "forward_kl",
    dtype: torch.dtype = torch.float64,
) -> GradCheckResult:
    """Compare autograd gradients of the distillation loss with central differences.

    Runs on a float64 copy of the model by default: at epsilon around 1e-3
    the float32 difference quotient is dominated by rounding noise rather
    than by the truncation error the check is meant to bound.
    """
    work = copy.deepcopy(model).to(dtype)
    cfg = TrainConfig(objective=objective, B_blocks_per_seq=anchors.n_blocks)

    def loss_fn() -> torch.Tensor:
        # fresh rng per call so the loss stays a fixed function under perturbation
        return _distill_sequence_loss(work, sequence, anchors, cfg, np.random.default_rng(seed))

    loss = loss_fn()
    loss.backward()
    frozen_absent = all(p.grad is None for _, p in frozen_parameters(work))

    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    for name, p in trainable_parameters(work):
        analytic = p.grad
        assert analytic is not None, f"no gradient reached {name}"
        flat = p.data.view(-1)
        n = min(coords_per_tensor, flat.numel())
        coords = rng.choice(flat.numel(), size=n, replace=False)
        worst = 0.0
        with torch.no_grad():
            for c in coords:
                c = int(c)
                orig = float(flat[c])
                flat[c] = orig + epsilon
                lo_hi = float(loss_fn())
                flat[c] = orig - epsilon
                lo_lo = float(loss_fn())
                flat[c] = orig
                fd = (lo_hi - lo_lo) / (2.0 * epsilon)
                an = float(analytic.view(-1)[c])
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                worst = max(worst, rel)
        per_tensor[name] = worst
    return GradCheckResult(
        max_rel_error=max(per_tensor.values()),
        per_tensor=per_tensor,
        frozen_grads_absent=frozen_absent,
        epsilon=epsilon,
    )
