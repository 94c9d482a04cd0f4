"""Model and training configuration dataclasses."""

from __future__ import annotations

from dataclasses import dataclass, field, fields


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the dual-view transformer.

    The mask token occupies the single id right after the base vocabulary,
    so embeddings cover ``vocab_size`` real tokens plus one trainable mask
    vector, and the output head scores ``vocab_size + 1`` symbols.
    """

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab_size: int = 16
    max_seq_len: int = 512
    block_size_K: int = 8
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.d_head % 2 != 0:
            raise ValueError("d_head must be even for rotary position encoding")
        if not (1 <= self.block_size_K <= self.max_seq_len):
            raise ValueError(f"block_size_K={self.block_size_K} out of [1, max_seq_len]")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")

    @property
    def mask_token_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        # values may arrive as strings from a key=value config file
        casts = {f.name: (float if f.name == "rope_base" else int) for f in fields(cls)}
        kwargs = {k: casts[k](v) for k, v in d.items() if k in casts}
        return cls(**kwargs)


@dataclass
class TrainConfig:
    """Optimization settings shared by backbone pretraining and distillation."""

    learning_rate: float = 1e-3
    warmup_ratio: float = 0.05
    schedule: str = "cosine"
    grad_clip_norm: float = 1.0
    epochs: int = 2
    micro_batch: int = 8
    grad_accum: int = 1
    B_blocks_per_seq: int = 16
    seq_len_L: int = 256
    objective: str = "forward_kl"
    seed: int = 0
    separator_token_id: int | None = None
    block_masking: str = "anchor_only"
    metrics_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.schedule not in ("cosine",):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.objective not in ("forward_kl", "cross_entropy"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.block_masking not in ("anchor_only", "complementary_half"):
            raise ValueError(f"unknown block_masking {self.block_masking!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class DecodeConfig:
    """Decode-loop settings used by the CLI and benchmark harness."""

    block_size_K: int | None = None
    temperature: float = 0.0
    max_new_tokens: int = 64
    seed: int = 0
    eos_token_id: int | None = None
    mode: str = "orthrus"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RunConfig:
    """Fully resolved run settings: model + training + decode + data source.

    Echoed verbatim into every output artifact so results are reproducible
    from the artifact alone.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "decode": self.decode.to_dict(),
            "data": dict(self.data),
        }
