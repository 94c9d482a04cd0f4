"""Throughput, memory, and ablation accounting for the decode loop.

All primary metrics are hardware-agnostic counts: tokens per forward pass
(TPF), pass-count speedups against the sequential baseline, and cache
element counts. Wall-clock numbers are carried along but never asserted.
"""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Corpus
from .errors import LosslessnessViolationError, ZeroPassesError
from .inference import DecodeStats, generate, generate_ar_baseline
from .model import DualViewTransformer

__all__ = [
    "DecodeStats",
    "MemoryReport",
    "compute_tpf",
    "speedup_vs_baseline",
    "cache_overhead_report",
    "ablate_block_size",
    "ablate_objective",
    "emit_report",
]


def compute_tpf(stats: DecodeStats) -> float:
    """Generated tokens per decode forward pass (prefill excluded)."""
    if stats.decode_forward_passes <= 0:
        raise ZeroPassesError("no decode passes recorded")
    return stats.generated_tokens / stats.decode_forward_passes


def speedup_vs_baseline(
    orthrus: DecodeStats,
    baseline: DecodeStats,
    orthrus_tokens: list[int] | None = None,
    baseline_tokens: list[int] | None = None,
) -> float:
    """Pass-count speedup for equal token budgets: baseline passes / ours.

    When both token sequences are supplied (greedy runs), any mismatch is a
    correctness failure, not a benchmark data point.
    """
    if orthrus_tokens is not None and baseline_tokens is not None:
        if orthrus_tokens != baseline_tokens:
            raise LosslessnessViolationError("outputs differ; speedup comparison is meaningless")
    if orthrus.generated_tokens != baseline.generated_tokens:
        raise ValueError(
            f"token budgets differ: {orthrus.generated_tokens} vs {baseline.generated_tokens}"
        )
    if orthrus.decode_forward_passes <= 0:
        raise ZeroPassesError("no decode passes recorded")
    return baseline.decode_forward_passes / orthrus.decode_forward_passes


@dataclass
class MemoryReport:
    """Cache element counts across committed lengths.

    The committed cache is identical for both decoders at every length; the
    only extra memory the parallel view ever holds is the transient block
    buffer, so the overhead delta must be a constant function of the model
    shape and block size, never of the sequence length.
    """

    lengths: list[int]
    committed_elements_orthrus: list[int]
    committed_elements_baseline: list[int]
    transient_block_elements: list[int]
    delta: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.delta:
            self.delta = [
                o + t - b
                for o, t, b in zip(
                    self.committed_elements_orthrus,
                    self.transient_block_elements,
                    self.committed_elements_baseline,
                )
            ]


def expected_transient_elements(model: DualViewTransformer, K: int | None = None) -> int:
    """Block-buffer elements from the concatenation arithmetic: per-layer K/V plus logits."""
    cfg = model.config
    K = cfg.block_size_K if K is None else K
    return 2 * cfg.n_layers * K * cfg.d_model + K * (cfg.vocab_size + 1)


def cache_overhead_report(
    model: DualViewTransformer,
    lengths: list[int],
    gen_tokens: int = 16,
    seed: int = 0,
) -> MemoryReport:
    """Run both decoders to each committed length and count cache elements.

    The prompt is sized so that prompt + generated - 1 committed entries land
    exactly on the requested length for both decoders.
    """
    cfg = model.config
    committed_o: list[int] = []
    committed_b: list[int] = []
    transient: list[int] = []
    rng = np.random.default_rng(seed)
    for L in lengths:
        if L + 1 > cfg.max_seq_len:
            raise ValueError(f"length {L} leaves no room under max_seq_len={cfg.max_seq_len}")
        prompt_len = L - gen_tokens + 1
        if prompt_len < 1:
            raise ValueError(f"length {L} shorter than the generation budget")
        prompt = rng.integers(0, cfg.vocab_size, size=prompt_len).tolist()

        res_o = generate(model, prompt, gen_tokens, temperature=0.0, seed=seed)
        res_b = generate_ar_baseline(model, prompt, gen_tokens, temperature=0.0, seed=seed)

        committed_o.append(res_o.stats.final_committed_elements)
        committed_b.append(res_b.stats.final_committed_elements)
        transient.append(res_o.stats.max_transient_elements)
    return MemoryReport(
        lengths=list(lengths),
        committed_elements_orthrus=committed_o,
        committed_elements_baseline=committed_b,
        transient_block_elements=transient,
    )


def ablate_block_size(
    model: DualViewTransformer,
    prompts: list[list[int]],
    k_values: list[int],
    max_new_tokens: int = 64,
    check_trend: bool = True,
) -> list[dict]:
    """Decode the prompt suite at several inference block sizes.

    Inference K may not exceed the trained block size. The trend check
    compares the endpoints (largest vs smallest K): pointwise monotonicity
    is too noise-sensitive to assert on finite suites.
    """
    K_train = model.config.block_size_K
    for k in k_values:
        if k > K_train:
            raise ValueError(f"inference K={k} exceeds trained block size {K_train}")
    rows = []
    for k in sorted(k_values):
        tokens = 0
        passes = 0
        accept: list[int] = []
        for prompt in prompts:
            res = generate(model, prompt, max_new_tokens, temperature=0.0, K=k)
            tokens += res.stats.generated_tokens
            passes += res.stats.decode_forward_passes
            accept.extend(res.stats.acceptance_lengths)
        rows.append(
            {
                "K": k,
                "tpf": tokens / passes,
                "passes": passes,
                "tokens": tokens,
                "mean_accept": float(np.mean(accept)) if accept else 0.0,
            }
        )
    if check_trend and len(rows) >= 2 and rows[-1]["tpf"] < rows[0]["tpf"]:
        raise AssertionError(
            f"TPF fell from {rows[0]['tpf']:.3f} at K={rows[0]['K']} "
            f"to {rows[-1]['tpf']:.3f} at K={rows[-1]['K']}"
        )
    return rows


def ablate_objective(
    backbone: DualViewTransformer,
    corpus: Corpus,
    config: TrainConfig,
    prompts: list[list[int]],
    max_new_tokens: int = 64,
) -> list[dict]:
    """Distill twin heads (soft KL vs hard CE) and compare decode throughput.

    Both heads must produce identical greedy output (verification filters
    drafts regardless of how the head was trained); the accuracy proxy is
    the backbone's per-token NLL over the committed continuation, which is
    therefore identical too. Only TPF may differ.
    """
    from .model import init_diffusion_from_ar
    from .training import distill

    rows = []
    reference_tokens: list[list[int]] | None = None
    for objective in ("forward_kl", "cross_entropy"):
        variant = copy.deepcopy(backbone)
        init_diffusion_from_ar(variant)
        cfg = TrainConfig(**{**config.to_dict(), "objective": objective})
        distill(variant, corpus, cfg)

        tokens = 0
        passes = 0
        nll_total, nll_count = 0.0, 0
        outputs: list[list[int]] = []
        for prompt in prompts:
            res = generate(variant, prompt, max_new_tokens, temperature=0.0)
            outputs.append(res.tokens)
            tokens += res.stats.generated_tokens
            passes += res.stats.decode_forward_passes
            nll, n = _continuation_nll(variant, prompt, res.tokens)
            nll_total += nll
            nll_count += n
        if reference_tokens is None:
            reference_tokens = outputs
        elif outputs != reference_tokens:
            raise LosslessnessViolationError("objectives produced different greedy output")
        rows.append(
            {
                "objective": objective,
                "accuracy_proxy_nll": nll_total / max(1, nll_count),
                "tpf": tokens / passes,
            }
        )
    return rows


def _continuation_nll(
    model: DualViewTransformer, prompt: list[int], tokens: list[int]
) -> tuple[float, int]:
    """Backbone NLL (nats) of the committed continuation, summed and counted."""
    import torch

    from .model import SharedKVCache

    with torch.no_grad():
        cache = SharedKVCache.for_model(model.config, capacity=len(tokens))
        out = model.ar_forward(tokens[:-1], cache)
        logp = torch.log_softmax(out.logits, dim=-1)
        cont = torch.tensor(tokens[len(prompt) :])
        rows = torch.arange(len(prompt) - 1, len(tokens) - 1)
        return float(-logp[rows, cont].sum()), len(cont)


def emit_report(
    results: list[dict],
    out_dir: str | Path,
    summary: dict | None = None,
    plots: bool = False,
) -> dict[str, Path]:
    """Write per-run CSV rows, a JSON summary, and optional trend plots.

    The CSV schema is fixed (prompt_id, config, tokens, passes, tpf,
    mean_accept) and rows are emitted in input order, so identical inputs
    reproduce byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    csv_path = out_dir / "results.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt_id", "config", "tokens", "passes", "tpf", "mean_accept"])
    for row in results:
        writer.writerow(
            [
                row["prompt_id"],
                row["config"],
                row["tokens"],
                row["passes"],
                f"{row['tpf']:.6f}",
                f"{row['mean_accept']:.6f}",
            ]
        )
    csv_path.write_text(buf.getvalue())
    paths["csv"] = csv_path

    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary or {}, indent=2, sort_keys=True) + "\n")
    paths["json"] = json_path

    if plots:
        paths.update(_emit_plots(results, summary or {}, out_dir))
    return paths


def _emit_plots(results: list[dict], summary: dict, out_dir: Path) -> dict[str, Path]:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return {}
    paths: dict[str, Path] = {}
    k_rows = summary.get("k_sweep")
    if k_rows:
        fig, ax = plt.subplots()
        ax.plot([r["K"] for r in k_rows], [r["tpf"] for r in k_rows], marker="o")
        ax.set_xlabel("inference block size K")
        ax.set_ylabel("tokens per forward pass")
        path = out_dir / "tpf_vs_k.png"
        fig.savefig(path)
        plt.close(fig)
        paths["tpf_vs_k"] = path
    mem = summary.get("memory")
    if mem:
        fig, ax = plt.subplots()
        ax.plot(mem["lengths"], mem["delta"], marker="o")
        ax.set_xlabel("committed length")
        ax.set_ylabel("overhead delta (elements)")
        path = out_dir / "delta_vs_len.png"
        fig.savefig(path)
        plt.close(fig)
        paths["delta_vs_len"] = path
    return paths
