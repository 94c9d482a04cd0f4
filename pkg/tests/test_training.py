"""Loss functions, training loops, and the finite-difference gradient harness.

Loss-function values are checked against independent elementwise oracles and
closed forms; convergence targets come from the corpora's known entropies
(zero for the repeating cycle, H(T) for the chain).
"""

import math

import numpy as np
import pytest
import torch

from orthrus import (
    TrainConfig,
    ar_pretrain,
    backbone_checksum,
    ce_loss_variant,
    distill,
    gen_deterministic_corpus,
    grad_check,
    init_diffusion_from_ar,
    kl_loss,
    markov_conditional_entropy,
    sample_anchors,
)
from orthrus.errors import DivergenceError
from orthrus.model import frozen_parameters, trainable_parameters
from orthrus.training import held_out_kl, smoothed_monotone_decrease

from conftest import tiny_model


def brute_force_kl(p_rows: torch.Tensor, q_rows: torch.Tensor) -> float:
    """Elementwise sum of p * log(p/q), skipping zero-probability teacher entries."""
    total = 0.0
    for p, q in zip(p_rows, q_rows):
        for pi, qi in zip(p.tolist(), q.tolist()):
            if pi > 0:
                total += pi * math.log(pi / qi)
    return total


class TestKLLoss:
    def test_identity_is_zero(self):
        logits = torch.randn(5, 7)
        assert float(kl_loss(logits, logits.clone())) == pytest.approx(0.0, abs=1e-7)

    def test_one_hot_teacher_vs_uniform_student(self):
        teacher = torch.full((1, 4), -1e9)
        teacher[0, 2] = 0.0
        student = torch.zeros(1, 4)
        assert float(kl_loss(teacher, student)) == pytest.approx(math.log(4), abs=1e-6)

    def test_matches_brute_force_oracle(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(10):
            t = torch.randn(6, 9, generator=gen)
            s = torch.randn(6, 9, generator=gen)
            expected = brute_force_kl(torch.softmax(t, -1), torch.softmax(s, -1))
            assert float(kl_loss(t, s)) == pytest.approx(expected, abs=1e-6)

    def test_nonnegative_with_equality_iff_match(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(20):
            t = torch.randn(4, 6, generator=gen)
            s = torch.randn(4, 6, generator=gen)
            val = float(kl_loss(t, s))
            assert val >= 0
            assert val > 1e-6  # random rows essentially never coincide

    def test_teacher_rows_detached(self):
        teacher = torch.randn(3, 5, requires_grad=True)
        student = torch.randn(3, 5, requires_grad=True)
        kl_loss(teacher, student).backward()
        assert teacher.grad is None
        assert student.grad is not None

    def test_extreme_student_logits_stay_finite(self):
        teacher = torch.zeros(1, 4)
        student = torch.tensor([[0.0, -1e4, 0.0, 0.0]])
        assert math.isfinite(float(kl_loss(teacher, student)))


class TestCELossVariant:
    def test_one_hot_student_is_zero(self):
        logits = torch.full((2, 4), -1e4)
        logits[0, 1] = logits[1, 3] = 1e4
        targets = torch.tensor([1, 3])
        assert float(ce_loss_variant(targets, logits)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_student(self):
        logits = torch.zeros(3, 4)
        targets = torch.tensor([0, 1, 2])
        assert float(ce_loss_variant(targets, logits)) == pytest.approx(math.log(4), abs=1e-6)

    def test_equals_kl_for_one_hot_teacher(self):
        """Row for row, CE against a hard target equals KL against the one-hot
        teacher; the aggregates differ only by the mean-vs-sum convention."""
        gen = torch.Generator().manual_seed(2)
        student = torch.randn(5, 6, generator=gen)
        targets = torch.tensor([0, 2, 5, 1, 3])
        teacher = torch.full((5, 6), -1e9)
        teacher[torch.arange(5), targets] = 0.0
        kl = float(kl_loss(teacher, student))
        ce = float(ce_loss_variant(targets, student))
        assert kl == pytest.approx(5 * ce, rel=1e-5)


class TestARPretrain:
    def test_untrained_uniform_loss(self):
        """Before any step a zero-weight model predicts uniformly over the
        vocab plus mask column, so per-token loss is ln(vocab+1)."""
        model = tiny_model(sealed=False, copied_head=False)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            tokens = torch.randint(0, model.config.vocab_size, (2, 16))
            logits = model.causal_forward_batch(tokens)
            loss = torch.nn.functional.cross_entropy(
                logits[:, :-1].reshape(-1, model.config.vocab_size + 1),
                tokens[:, 1:].reshape(-1),
            )
        assert float(loss) == pytest.approx(math.log(model.config.vocab_size + 1), abs=1e-5)

    def test_divergence_aborts(self):
        model = tiny_model(sealed=False, copied_head=False)
        corpus = gen_deterministic_corpus([0, 1, 2], 600, seed=0)
        cfg = TrainConfig(
            learning_rate=1e12, epochs=2, micro_batch=4, seq_len_L=16,
            B_blocks_per_seq=2, seed=0, separator_token_id=3,
        )
        with pytest.raises(DivergenceError):
            ar_pretrain(model, corpus, cfg)

    def test_seals_backbone(self):
        model = tiny_model(sealed=False, copied_head=False)
        corpus = gen_deterministic_corpus([0, 1], 400, seed=0)
        cfg = TrainConfig(
            learning_rate=1e-3, epochs=1, micro_batch=4, seq_len_L=16,
            B_blocks_per_seq=2, seed=0, separator_token_id=3,
        )
        report = ar_pretrain(model, corpus, cfg)
        assert model.sealed
        assert all(not p.requires_grad for _, p in frozen_parameters(model))
        assert report.tokens_consumed > 0
        with pytest.raises(ValueError):
            ar_pretrain(model, corpus, cfg)

    def test_deterministic_corpus_converges(self, det_assets):
        assert det_assets.pretrain_report.final_loss < 0.01

    def test_markov_corpus_reaches_conditional_entropy(self, markov_assets):
        target = markov_conditional_entropy(markov_assets.transition)
        assert abs(markov_assets.pretrain_report.final_loss - target) < 0.05


class TestDistill:
    def _quick_setup(self, seed=0):
        model = tiny_model(seed=seed, sealed=False, copied_head=False)
        corpus = gen_deterministic_corpus([0, 1, 2], 2_000, seed=0)
        pre = TrainConfig(
            learning_rate=2e-3, epochs=2, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3,
        )
        ar_pretrain(model, corpus, pre)
        init_diffusion_from_ar(model)
        return model, corpus, pre

    def test_requires_sealed_backbone(self):
        model = tiny_model(sealed=False)
        corpus = gen_deterministic_corpus([0, 1], 200, seed=0)
        with pytest.raises(ValueError):
            distill(model, corpus, TrainConfig(seq_len_L=16, B_blocks_per_seq=2))

    def test_frozen_subset_bitwise_unchanged(self):
        model, corpus, pre = self._quick_setup()
        frozen_before = {
            n: p.detach().clone() for n, p in frozen_parameters(model)
        }
        cfg = TrainConfig(
            learning_rate=2e-3, epochs=1, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3,
        )
        distill(model, corpus, cfg)
        for n, p in frozen_parameters(model):
            assert torch.equal(p, frozen_before[n]), n
        assert backbone_checksum(model) == backbone_checksum(model)

    def test_deterministic_given_seed(self):
        reports = []
        for _ in range(2):
            model, corpus, _ = self._quick_setup(seed=0)
            cfg = TrainConfig(
                learning_rate=2e-3, epochs=1, micro_batch=8, seq_len_L=32,
                B_blocks_per_seq=4, seed=7, separator_token_id=3,
            )
            reports.append(distill(model, corpus, cfg))
        assert reports[0].step_losses == reports[1].step_losses

    def test_trainable_params_change_and_loss_drops(self):
        model, corpus, _ = self._quick_setup()
        before = {n: p.detach().clone() for n, p in trainable_parameters(model)}
        cfg = TrainConfig(
            learning_rate=3e-3, epochs=4, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3,
        )
        report = distill(model, corpus, cfg)
        assert any(not torch.equal(p, before[n]) for n, p in trainable_parameters(model))
        assert report.final_loss < report.step_losses[0]

    def test_cross_entropy_objective_runs(self):
        model, corpus, _ = self._quick_setup()
        cfg = TrainConfig(
            learning_rate=2e-3, epochs=1, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3, objective="cross_entropy",
        )
        report = distill(model, corpus, cfg)
        assert math.isfinite(report.final_loss)

    def test_metrics_stream(self, tmp_path):
        import json

        model, corpus, _ = self._quick_setup()
        path = tmp_path / "metrics.jsonl"
        cfg = TrainConfig(
            learning_rate=2e-3, epochs=1, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3, metrics_path=str(path),
        )
        report = distill(model, corpus, cfg)
        records = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(records) == len(report.step_losses)
        assert set(records[0]) == {"step", "loss", "lr", "grad_norm"}

    def test_interval_checkpoints(self, tmp_path):
        from orthrus.checkpoint import load_checkpoint

        model, corpus, _ = self._quick_setup()
        cfg = TrainConfig(
            learning_rate=2e-3, epochs=1, micro_batch=8, seq_len_L=32,
            B_blocks_per_seq=4, seed=0, separator_token_id=3,
            checkpoint_dir=str(tmp_path / "ckpts"), checkpoint_interval=3,
        )
        report = distill(model, corpus, cfg)
        written = sorted((tmp_path / "ckpts").glob("step*.orth"))
        assert len(written) == len(report.step_losses) // 3
        mid, _ = load_checkpoint(written[0])
        assert mid.sealed

    def test_converged_head_matches_teacher_on_held_out_text(self, det_assets):
        value = held_out_kl(det_assets.model, det_assets.heldout, det_assets.train_config)
        assert value < 0.05

    def test_teacher_rows_constant_under_head_perturbation(self, det_assets):
        """Recorded teacher rows depend only on the frozen path: perturbing the
        trainable head must leave them bitwise identical."""
        import copy

        from orthrus.model import SharedKVCache

        model = copy.deepcopy(det_assets.model)
        seq = [0, 1, 2] * 8
        cache = SharedKVCache.for_model(model.config, capacity=len(seq))
        with torch.no_grad():
            rows_before = model.ar_forward(seq, cache, commit=True).logits.clone()
            for _, p in trainable_parameters(model):
                p += 0.37
            cache2 = SharedKVCache.for_model(model.config, capacity=len(seq))
            rows_after = model.ar_forward(seq, cache2, commit=True).logits
        assert torch.equal(rows_before, rows_after)


class TestSmoothedMonotone:
    def test_decreasing_with_jitter_passes(self):
        rng = np.random.default_rng(0)
        losses = (2.0 * np.exp(-np.linspace(0, 4, 300)) + rng.normal(0, 0.01, 300)).tolist()
        assert smoothed_monotone_decrease(losses, window=50)

    def test_diverging_curve_fails(self):
        losses = (np.linspace(2.0, 1.0, 150).tolist() + np.linspace(1.0, 3.0, 150).tolist())
        assert not smoothed_monotone_decrease(losses, window=50)

    def test_needs_enough_steps(self):
        with pytest.raises(ValueError):
            smoothed_monotone_decrease([1.0] * 10, window=50)


class TestGradCheck:
    def _setup(self):
        cfg_kwargs = dict(
            n_layers=2, n_heads=2, d_model=16, d_head=8, vocab_size=11,
            max_seq_len=64, block_size_K=3,
        )
        model = tiny_model(seed=3, **cfg_kwargs)
        rng = np.random.default_rng(0)
        seq = rng.integers(0, 11, size=24).tolist()
        anchors = sample_anchors(len(seq), B=2, K=3, seed=5)
        return model, seq, anchors

    def test_analytic_matches_central_differences(self):
        model, seq, anchors = self._setup()
        res = grad_check(model, seq, anchors, epsilon=1e-3, coords_per_tensor=64, seed=0)
        assert res.max_rel_error < 1e-2
        assert set(res.per_tensor) == {n for n, _ in trainable_parameters(model)}

    def test_frozen_coordinates_have_no_gradient(self):
        model, seq, anchors = self._setup()
        res = grad_check(model, seq, anchors, epsilon=1e-3, coords_per_tensor=8, seed=0)
        assert res.frozen_grads_absent

    def test_truncation_error_scales_quadratically(self):
        """Central differences carry an O(eps^2) truncation term; doubling eps
        should roughly quadruple the dominant error."""
        model, seq, anchors = self._setup()
        r1 = grad_check(model, seq, anchors, epsilon=1e-3, coords_per_tensor=64, seed=0)
        r2 = grad_check(model, seq, anchors, epsilon=2e-3, coords_per_tensor=64, seed=0)
        ratio = r2.max_rel_error / r1.max_rel_error
        assert 2.0 < ratio < 8.0

    def test_cross_entropy_objective(self):
        model, seq, anchors = self._setup()
        res = grad_check(
            model, seq, anchors, epsilon=5e-4, coords_per_tensor=32, seed=0,
            objective="cross_entropy",
        )
        assert res.max_rel_error < 1e-2
