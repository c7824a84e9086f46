import os
import sys

import numpy as np
import pytest

from specprune.corpus import Corpus, load_corpus, bundled_corpus_path
from specprune.model import Model, ModelConfig, init_model
from specprune.perf import tune_allocator

tune_allocator()

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "golden")
GOLDEN_CKPT = os.path.normpath(os.path.join(GOLDEN_DIR, "target.ckpt"))
GOLDEN_METRICS = os.path.normpath(os.path.join(GOLDEN_DIR, "metrics.json"))


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=257, d_model=16, n_heads=2, n_layers=2, d_ff=32,
        max_context=32, rng_seed=11,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def corpus() -> Corpus:
    return load_corpus(bundled_corpus_path())


@pytest.fixture(scope="session")
def tiny_model() -> Model:
    return init_model(tiny_config())


@pytest.fixture(scope="session")
def golden_target() -> Model:
    """The fully trained default-config target model.

    Loads the checked-in checkpoint; regenerate with tools/train_golden.py
    if it is missing.
    """
    from specprune.checkpoint import load_checkpoint

    if not os.path.exists(GOLDEN_CKPT):
        pytest.skip(
            "golden checkpoint missing; run `python tools/train_golden.py` first"
        )
    return load_checkpoint(GOLDEN_CKPT)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
