"""Dual-view transformer with lossless parallel decoding.

A frozen autoregressive backbone is augmented, layer by layer, with a
trainable diffusion attention path that reads the same KV cache and predicts
a block of future tokens in one pass. Distillation aligns the parallel
predictions with the backbone's exact next-token distributions; at decode
time a draft/verify consensus loop commits only tokens the backbone itself
would have produced, so acceleration never changes the output.
"""

from .config import DecodeConfig, ModelConfig, RunConfig, TrainConfig
from .data import (
    Corpus,
    PackedBatch,
    byte_detokenize,
    byte_tokenize,
    gen_deterministic_corpus,
    gen_markov_corpus,
    load_corpus,
    markov_conditional_entropy,
    pack_sequences,
    save_corpus,
)
from .inference import (
    DecodeState,
    DecodeStats,
    DraftResult,
    GenerationResult,
    VerifyResult,
    consensus_greedy,
    consensus_sampling,
    draft_block,
    generate,
    generate_ar_baseline,
    generate_multistep_variant,
    prefill,
    verify_block,
)
from .masking import (
    AnchorSet,
    CorruptedBlock,
    build_diffusion_mask,
    build_training_batch,
    corrupt_block,
    sample_anchors,
)
from .model import (
    DualViewTransformer,
    ForwardOutput,
    SharedKVCache,
    backbone_checksum,
    cache_truncate,
    init_diffusion_from_ar,
    seal_backbone,
    trainable_fraction,
)
from .training import (
    TrainReport,
    ar_pretrain,
    ce_loss_variant,
    distill,
    distill_epoch,
    grad_check,
    kl_loss,
)

__version__ = "0.1.0"
