"""Command-line entry point: pretrain, distill, generate, bench.

Configuration is a flat key=value file with section prefixes (model.,
train., decode., data.); command-line flags override file values. Logs go
to stderr, data to files or stdout. Exit codes: 0 success, 1 usage,
2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import (
    ablate_block_size,
    cache_overhead_report,
    compute_tpf,
    emit_report,
    speedup_vs_baseline,
)
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .config import DecodeConfig, ModelConfig, RunConfig, TrainConfig
from .data import (
    Corpus,
    byte_detokenize,
    byte_tokenize,
    gen_deterministic_corpus,
    gen_markov_corpus,
    load_corpus,
)
from .errors import OrthrusError
from .inference import generate, generate_ar_baseline, generate_multistep_variant
from .model import DualViewTransformer, init_diffusion_from_ar
from .training import ar_pretrain, distill

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("orthrus")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2; we reserve that
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines; '#' comments; sections encoded in key prefixes."""
    values: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _section(values: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}


def _build_train_config(raw: dict[str, str]) -> TrainConfig:
    casts = {
        "learning_rate": float,
        "warmup_ratio": float,
        "grad_clip_norm": float,
        "epochs": int,
        "micro_batch": int,
        "grad_accum": int,
        "B_blocks_per_seq": int,
        "seq_len_L": int,
        "seed": int,
        "separator_token_id": int,
        "checkpoint_interval": int,
        "schedule": str,
        "objective": str,
        "block_masking": str,
        "metrics_path": str,
        "checkpoint_dir": str,
    }
    kwargs = {}
    for key, value in raw.items():
        if key not in casts:
            raise ConfigError(f"unknown train key: train.{key}")
        kwargs[key] = casts[key](value)
    return TrainConfig(**kwargs)


def _build_decode_config(raw: dict[str, str]) -> DecodeConfig:
    casts = {
        "block_size_K": int,
        "temperature": float,
        "max_new_tokens": int,
        "seed": int,
        "eos_token_id": int,
        "mode": str,
    }
    kwargs = {}
    for key, value in raw.items():
        if key not in casts:
            raise ConfigError(f"unknown decode key: decode.{key}")
        kwargs[key] = casts[key](value)
    return DecodeConfig(**kwargs)


def resolve_run_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    values = parse_config_file(path)
    values.update(overrides or {})
    try:
        model = ModelConfig.from_dict(_section(values, "model."))
        train = _build_train_config(_section(values, "train."))
        decode = _build_decode_config(_section(values, "decode."))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model=model, train=train, decode=decode, data=_section(values, "data."))


def _load_corpus_from_config(data: dict[str, str], seed: int) -> Corpus:
    kind = data.get("kind")
    if kind is None and "corpus_file" in data:
        kind = "file"
    if kind == "deterministic":
        pattern = [int(t) for t in data["pattern"].split(",")]
        return gen_deterministic_corpus(
            pattern, int(data["total_tokens"]), int(data.get("seed", seed))
        )
    if kind == "markov":
        if "transition_file" in data:
            T = np.asarray(json.loads(Path(data["transition_file"]).read_text()))
        else:
            n = int(data["vocab"])
            diag = float(data.get("self_prob", 0.75))
            T = np.full((n, n), (1.0 - diag) / (n - 1))
            np.fill_diagonal(T, diag)
        return gen_markov_corpus(T, int(data["total_tokens"]), int(data.get("seed", seed)))
    if kind == "bytes":
        return byte_tokenize(data["text_file"])
    if kind == "file":
        return load_corpus(data["corpus_file"])
    raise ConfigError(f"unknown or missing data.kind: {kind!r}")


def _artifact_header(run: RunConfig, ckpt_path: str | Path | None) -> dict:
    header = {"run_config": run.to_dict()}
    if ckpt_path is not None:
        header["checkpoint"] = str(ckpt_path)
        header["checkpoint_sha256"] = checkpoint_hash(ckpt_path)
    return header


def cmd_pretrain(args: argparse.Namespace) -> int:
    run = resolve_run_config(args.config, _overrides(args))
    corpus = _load_corpus_from_config(run.data, run.train.seed)
    if corpus.vocab_size > run.model.vocab_size:
        raise ConfigError(
            f"corpus vocab {corpus.vocab_size} exceeds model vocab {run.model.vocab_size}"
        )
    model = DualViewTransformer(run.model, seed=run.train.seed)
    log.info("pretraining backbone on %d tokens", corpus.total_tokens)
    report = ar_pretrain(model, corpus, run.train)
    init_diffusion_from_ar(model)
    save_checkpoint(model, args.output, meta={"stage": "pretrained"})
    log.info("final loss %.4f nats; checkpoint written to %s", report.final_loss, args.output)
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    run = resolve_run_config(args.config, _overrides(args))
    model, meta = load_checkpoint(args.backbone)
    if not model.sealed:
        print("error: backbone checkpoint is not sealed; run pretrain first", file=sys.stderr)
        return EXIT_RUNTIME
    from .model import backbone_checksum

    before = backbone_checksum(model)
    corpus = _load_corpus_from_config(run.data, run.train.seed)
    log.info("distilling diffusion head on %d tokens", corpus.total_tokens)
    report = distill(model, corpus, run.train)
    if backbone_checksum(model) != before:
        print("error: backbone changed during distillation; refusing to save", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(model, args.output, meta={"stage": "distilled", "backbone_sha": before})
    log.info(
        "final loss %.4f; trainable fraction %.1f%%; checkpoint %s",
        report.final_loss,
        100 * report.trainable_fraction,
        args.output,
    )
    return EXIT_OK


def _read_prompts(path: str | Path, as_bytes: bool) -> list[list[int]]:
    prompts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if as_bytes:
            prompts.append(list(line.encode("utf-8")))
        else:
            prompts.append([int(t) for t in line.split()])
    return prompts


def cmd_generate(args: argparse.Namespace) -> int:
    run = resolve_run_config(args.config, _overrides(args)) if args.config else RunConfig()
    dec = run.decode
    if args.temperature is not None:
        dec.temperature = args.temperature
    if args.max_new is not None:
        dec.max_new_tokens = args.max_new
    if args.k is not None:
        dec.block_size_K = args.k
    if args.mode is not None:
        dec.mode = args.mode
    if args.seed is not None:
        dec.seed = args.seed
    if dec.mode not in ("orthrus", "ar", "multistep"):
        print(f"error: invalid mode {dec.mode!r}", file=sys.stderr)
        return EXIT_USAGE

    model, _ = load_checkpoint(args.checkpoint)
    prompts = _read_prompts(args.prompts, args.byte_text)
    header = _artifact_header(run, args.checkpoint)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        print(json.dumps({"header": header}), file=out)
        for pid, prompt in enumerate(prompts):
            if dec.mode == "ar":
                res = generate_ar_baseline(
                    model, prompt, dec.max_new_tokens, dec.temperature, dec.seed,
                    eos_token_id=dec.eos_token_id,
                )
            elif dec.mode == "multistep":
                res = generate_multistep_variant(
                    model, prompt, dec.max_new_tokens, dec.temperature, dec.seed,
                    K=dec.block_size_K, eos_token_id=dec.eos_token_id,
                )
            else:
                res = generate(
                    model, prompt, dec.max_new_tokens, dec.temperature, dec.seed,
                    K=dec.block_size_K, eos_token_id=dec.eos_token_id,
                )
            text = (
                byte_detokenize(res.tokens)
                if args.byte_text
                else " ".join(str(t) for t in res.tokens)
            )
            record = {
                "prompt_id": pid,
                "tokens": res.tokens,
                "text": text,
                "cycles": res.stats.cycles,
                "passes_by_view": res.stats.passes_by_view,
                "acceptance_lengths": res.stats.acceptance_lengths,
                "tpf": (
                    compute_tpf(res.stats) if res.stats.decode_forward_passes else None
                ),
            }
            print(json.dumps(record), file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    run = resolve_run_config(args.config, _overrides(args))
    model, _ = load_checkpoint(args.checkpoint)
    prompts = _read_prompts(args.prompts, as_bytes=False)
    dec = run.decode
    rows = []
    summary: dict = _artifact_header(run, args.checkpoint)

    total = {"orthrus": [0, 0], "ar": [0, 0]}
    for pid, prompt in enumerate(prompts):
        res_o = generate(
            model, prompt, dec.max_new_tokens, dec.temperature, dec.seed, K=dec.block_size_K
        )
        res_b = generate_ar_baseline(
            model, prompt, dec.max_new_tokens, dec.temperature, dec.seed
        )
        if dec.temperature == 0.0:
            speedup_vs_baseline(
                res_o.stats, res_b.stats, orthrus_tokens=res_o.tokens, baseline_tokens=res_b.tokens
            )
        for name, res in (("orthrus", res_o), ("ar", res_b)):
            stats = res.stats
            rows.append(
                {
                    "prompt_id": pid,
                    "config": name,
                    "tokens": stats.generated_tokens,
                    "passes": stats.decode_forward_passes,
                    "tpf": compute_tpf(stats),
                    "mean_accept": float(np.mean(stats.acceptance_lengths)),
                }
            )
            total[name][0] += stats.generated_tokens
            total[name][1] += stats.decode_forward_passes
    summary["tpf"] = {name: t / p for name, (t, p) in total.items()}
    summary["speedup"] = total["ar"][1] / total["orthrus"][1]

    if args.k_sweep:
        k_values = [int(k) for k in args.k_sweep.split(",")]
        summary["k_sweep"] = ablate_block_size(
            model, prompts, k_values, dec.max_new_tokens, check_trend=False
        )
    if args.memory_lengths:
        lengths = [int(x) for x in args.memory_lengths.split(",")]
        report = cache_overhead_report(model, lengths)
        summary["memory"] = {
            "lengths": report.lengths,
            "committed_orthrus": report.committed_elements_orthrus,
            "committed_baseline": report.committed_elements_baseline,
            "transient": report.transient_block_elements,
            "delta": report.delta,
        }
    paths = emit_report(rows, args.output_dir, summary, plots=args.plots)
    log.info("report written: %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key] = value
    if getattr(args, "seed", None) is not None and hasattr(args, "config"):
        out.setdefault("train.seed", str(args.seed))
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="orthrus", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and seal the AR backbone")
    p.add_argument("config", help="key=value config file")
    p.add_argument("--output", "-o", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="train the diffusion head against a sealed backbone")
    p.add_argument("config")
    p.add_argument("backbone", help="sealed backbone checkpoint")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("generate", help="decode a prompt file")
    p.add_argument("checkpoint")
    p.add_argument("prompts", help="one prompt per line: space-separated token ids")
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["orthrus", "ar", "multistep"], default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--byte-text", action="store_true", help="prompts are utf-8 text lines")
    p.add_argument("--output", "-o", default=None, help="write records here instead of stdout")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="run the prompt suite and emit reports")
    p.add_argument("checkpoint")
    p.add_argument("prompts")
    p.add_argument("config")
    p.add_argument("--output-dir", "-o", required=True)
    p.add_argument("--k-sweep", default=None, help="comma-separated inference K values")
    p.add_argument("--memory-lengths", default=None, help="comma-separated committed lengths")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OrthrusError, FileNotFoundError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
