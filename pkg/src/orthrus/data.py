"""Synthetic corpora with known statistics, byte tokenization, and packing.

The generators produce sources whose optimal next-token loss is known in
closed form (zero for a repeating cycle, the conditional entropy of the
transition matrix for an order-1 chain), which makes training quality and
throughput gains checkable without real data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Corpus:
    documents: list[list[int]]
    vocab_size: int
    descriptor: dict = field(default_factory=dict)

    @property
    def total_tokens(self) -> int:
        return sum(len(d) for d in self.documents)


@dataclass
class PackedBatch:
    """Fixed-length sequences with separators marking document boundaries."""

    sequences: list[list[int]]
    seq_len: int
    separator_token: int


def _split_stream(stream: list[int], rng: np.random.Generator, lo: int, hi: int) -> list[list[int]]:
    docs = []
    i = 0
    while i < len(stream):
        n = int(rng.integers(lo, hi + 1))
        docs.append(stream[i : i + n])
        i += n
    return [d for d in docs if d]


def gen_deterministic_corpus(
    pattern: list[int],
    total_tokens: int,
    seed: int,
    doc_len_range: tuple[int, int] = (4096, 8192),
) -> Corpus:
    """Repeat a token cycle and split the stream into random-length documents.

    Splitting preserves the stream, so the source stays deterministic given
    context. Keep documents long relative to the corpus if near-zero loss
    matters: every boundary adds one hard-to-predict separator position.
    """
    if not pattern:
        raise ValueError("empty pattern")
    reps = -(-total_tokens // len(pattern))
    stream = (list(pattern) * reps)[:total_tokens]
    rng = np.random.default_rng(seed)
    docs = _split_stream(stream, rng, *doc_len_range)
    vocab = max(pattern) + 2  # room for a separator above the pattern tokens
    return Corpus(
        documents=docs,
        vocab_size=vocab,
        descriptor={
            "kind": "deterministic",
            "pattern": list(pattern),
            "total_tokens": total_tokens,
            "seed": seed,
            "doc_len_range": list(doc_len_range),
        },
    )


def gen_markov_corpus(
    transition: np.ndarray | list[list[float]],
    total_tokens: int,
    seed: int,
) -> Corpus:
    """Sample one order-1 chain; the descriptor keeps the matrix for analytics."""
    T = np.asarray(transition, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("transition matrix must be row-stochastic")
    n_states = T.shape[0]
    rng = np.random.default_rng(seed)
    state = int(rng.integers(0, n_states))
    out = np.empty(total_tokens, dtype=np.int64)
    for i in range(total_tokens):
        out[i] = state
        state = int(rng.choice(n_states, p=T[state]))
    return Corpus(
        documents=[out.tolist()],
        vocab_size=n_states + 1,  # one extra id available as a separator
        descriptor={
            "kind": "markov",
            "transition": T.tolist(),
            "total_tokens": total_tokens,
            "seed": seed,
        },
    )


def markov_conditional_entropy(transition: np.ndarray | list[list[float]]) -> float:
    """Per-token conditional entropy (nats) of the chain at stationarity."""
    T = np.asarray(transition, dtype=np.float64)
    eigvals, eigvecs = np.linalg.eig(T.T)
    idx = int(np.argmin(np.abs(eigvals - 1.0)))
    pi = np.real(eigvecs[:, idx])
    pi = pi / pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(T > 0, np.log(T), 0.0)
    return float(-(pi[:, None] * T * logs).sum())


def byte_tokenize(path: str | Path) -> Corpus:
    """Byte-level tokens (vocab 256), one document per blank-line block."""
    text = Path(path).read_text(encoding="utf-8")
    blocks = [b for b in text.split("\n\n") if b.strip()]
    docs = [list(b.encode("utf-8")) for b in blocks]
    return Corpus(
        documents=docs,
        vocab_size=256,
        descriptor={"kind": "bytes", "source": str(path)},
    )


def byte_detokenize(tokens: list[int]) -> str:
    return bytes(tokens).decode("utf-8", errors="replace")


def pack_sequences(corpus: Corpus, L: int, separator_token: int, seed: int) -> PackedBatch:
    """Concatenate documents (separator-terminated) into exact-L sequences.

    Document order is shuffled by the seed; the trailing partial sequence is
    dropped rather than padded so anchor sampling never lands on filler.
    """
    if L < 2:
        raise ValueError("L must be at least 2")
    order = list(range(len(corpus.documents)))
    np.random.default_rng(seed).shuffle(order)
    stream: list[int] = []
    for i in order:
        stream.extend(corpus.documents[i])
        stream.append(separator_token)
    sequences = [stream[i : i + L] for i in range(0, len(stream) - L + 1, L)]
    return PackedBatch(sequences=sequences, seq_len=L, separator_token=separator_token)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Token ids as little-endian int32 plus a JSON sidecar with boundaries."""
    path = Path(path)
    if corpus.documents:
        flat = np.concatenate([np.asarray(d, dtype="<i4") for d in corpus.documents])
    else:
        flat = np.array([], dtype="<i4")
    path.write_bytes(flat.tobytes())
    sidecar = {
        "vocab_size": corpus.vocab_size,
        "doc_lengths": [len(d) for d in corpus.documents],
        "descriptor": corpus.descriptor,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<i4").tolist()
    docs = []
    i = 0
    for n in sidecar["doc_lengths"]:
        docs.append(flat[i : i + n])
        i += n
    return Corpus(
        documents=docs,
        vocab_size=sidecar["vocab_size"],
        descriptor=sidecar.get("descriptor", {}),
    )
