"""Shared fixtures: tiny models plus two trained pipelines.

The trained pipelines are expensive (tens of seconds each), so they are
session-scoped and shared between the unit tests and the acceptance suite:

* ``det_assets``: a backbone pretrained to near-zero loss on a repeating
  3-token cycle, one diffusion head distilled the standard way and another
  with complementary half-masking for the two-pass decode variant.
* ``markov_assets``: a backbone pretrained on an order-1 chain with a known
  transition matrix, an untrained (identity-initialized) head snapshot, and
  a distilled head, plus held-out prompts.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from orthrus import (
    Corpus,
    DualViewTransformer,
    ModelConfig,
    TrainConfig,
    TrainReport,
    ar_pretrain,
    distill,
    gen_deterministic_corpus,
    gen_markov_corpus,
    init_diffusion_from_ar,
    seal_backbone,
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_head=8,
        vocab_size=8,
        max_seq_len=64,
        block_size_K=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, sealed: bool = True, copied_head: bool = True, **overrides):
    model = DualViewTransformer(tiny_config(**overrides), seed=seed)
    if sealed:
        seal_backbone(model)
    if copied_head:
        init_diffusion_from_ar(model)
    return model


@pytest.fixture
def small_model():
    return tiny_model(seed=0)


@dataclass
class DetAssets:
    model: DualViewTransformer  # standard distilled head
    multistep_model: DualViewTransformer  # head trained with complementary half-masking
    corpus: Corpus
    heldout: Corpus
    pretrain_report: TrainReport
    distill_report: TrainReport
    train_config: TrainConfig
    pattern: list[int]


@pytest.fixture(scope="session")
def det_assets() -> DetAssets:
    torch.manual_seed(0)
    pattern = [0, 1, 2]
    config = ModelConfig(
        n_layers=2,
        n_heads=2,
        d_model=32,
        d_head=16,
        vocab_size=4,
        max_seq_len=256,
        block_size_K=8,
    )
    corpus = gen_deterministic_corpus(pattern, 12_000, seed=0)
    heldout = gen_deterministic_corpus(pattern, 4_000, seed=9)
    pre_cfg = TrainConfig(
        learning_rate=3e-3,
        epochs=20,
        micro_batch=16,
        seq_len_L=64,
        B_blocks_per_seq=8,
        seed=0,
        separator_token_id=3,
    )
    model = DualViewTransformer(config, seed=0)
    pre_report = ar_pretrain(model, corpus, pre_cfg)
    init_diffusion_from_ar(model)

    multistep_model = copy.deepcopy(model)

    dist_cfg = TrainConfig(
        learning_rate=5e-3,
        epochs=24,
        micro_batch=16,
        seq_len_L=64,
        B_blocks_per_seq=8,
        seed=0,
        separator_token_id=3,
    )
    dist_report = distill(model, corpus, dist_cfg)

    multi_cfg = TrainConfig(
        learning_rate=5e-3,
        epochs=24,
        micro_batch=16,
        seq_len_L=64,
        B_blocks_per_seq=8,
        seed=0,
        separator_token_id=3,
        block_masking="complementary_half",
    )
    distill(multistep_model, corpus, multi_cfg)

    return DetAssets(
        model=model,
        multistep_model=multistep_model,
        corpus=corpus,
        heldout=heldout,
        pretrain_report=pre_report,
        distill_report=dist_report,
        train_config=dist_cfg,
        pattern=pattern,
    )


def structured_transition(n: int = 8, diag: float = 0.76, step1: float = 0.12, step2: float = 0.12):
    T = np.zeros((n, n))
    for i in range(n):
        T[i, i] = diag
        T[i, (i + 1) % n] = step1
        T[i, (i + 2) % n] = step2
    return T


@dataclass
class MarkovAssets:
    model: DualViewTransformer  # distilled
    untrained: DualViewTransformer  # head still equal to the AR projections
    transition: np.ndarray
    corpus: Corpus
    prompts: list[list[int]]  # held-out, >= 55 of them
    pretrain_report: TrainReport
    distill_report: TrainReport
    train_config: TrainConfig


@pytest.fixture(scope="session")
def markov_assets() -> MarkovAssets:
    torch.manual_seed(0)
    T = structured_transition()
    config = ModelConfig(
        n_layers=2,
        n_heads=4,
        d_model=64,
        d_head=16,
        vocab_size=9,
        max_seq_len=512,
        block_size_K=8,
    )
    corpus = gen_markov_corpus(T, 100_000, seed=0)
    pre_cfg = TrainConfig(
        learning_rate=2e-3,
        epochs=6,
        micro_batch=16,
        seq_len_L=256,
        B_blocks_per_seq=16,
        seed=0,
        separator_token_id=8,
    )
    model = DualViewTransformer(config, seed=0)
    pre_report = ar_pretrain(model, corpus, pre_cfg)
    init_diffusion_from_ar(model)
    untrained = copy.deepcopy(model)

    dist_cfg = TrainConfig(
        learning_rate=2e-3,
        epochs=4,
        micro_batch=8,
        seq_len_L=256,
        B_blocks_per_seq=16,
        seed=0,
        separator_token_id=8,
    )
    dist_report = distill(model, corpus, dist_cfg)

    heldout_chain = gen_markov_corpus(T, 4_000, seed=123).documents[0]
    prompts = [heldout_chain[i * 40 : i * 40 + 12] for i in range(55)]

    return MarkovAssets(
        model=model,
        untrained=untrained,
        transition=T,
        corpus=corpus,
        prompts=prompts,
        pretrain_report=pre_report,
        distill_report=dist_report,
        train_config=dist_cfg,
    )
