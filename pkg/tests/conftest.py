"""Shared fixtures: a tiny synthetic collection, a tiny encoder and a fast end-to-end config."""

from pathlib import Path

import pytest
import torch

from dense_prf.encoder import ModelConfig, build_vocab, init_encoder
from dense_prf.etl.synthetic import SyntheticSpec, generate_synthetic

FIXTURES = Path(__file__).parent / "fixtures"

TINY_SPEC = dict(
    num_topics=4,
    num_docs=40,
    topic_vocab=12,
    noise_vocab=30,
    doc_length_min=6,
    doc_length_max=10,
    query_length=4,
    train_queries=8,
    dev_queries=4,
    test_queries=4,
    seed=7,
)


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(**TINY_SPEC)


@pytest.fixture
def bench(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def vocab(bench):
    return build_vocab(d.text for d in bench.corpus)


@pytest.fixture
def tiny_model_cfg(vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), num_layers=1, num_heads=2, model_dim=8, ff_dim=16,
                       max_len=24, query_budget=6, seed=3)


@pytest.fixture
def tiny_model(tiny_model_cfg):
    return init_encoder(tiny_model_cfg)


def fast_config_dict(out_dir: Path) -> dict:
    """Every stage of the workflow on the tiny collection, in a few seconds."""
    train = dict(negatives=2, batch_size=4, total_steps=4, eval_interval=2, log_interval=2,
                 negative_depth=10, learning_rate=0.005)
    return {
        "paths": {"out_dir": str(out_dir)},
        "synthetic": dict(TINY_SPEC),
        "model": {"num_layers": 1, "num_heads": 2, "model_dim": 8, "ff_dim": 16,
                  "max_len": 32, "query_budget": 6},
        "train_baseline": dict(train),
        "train_prf": dict(train, k=1),
        "prf": {"k": 1, "first_pass_depth": 50, "final_depth": 20},
        "retrieval": {"bm25_depth": 50},
        "analysis": {"ablation_ks": [0, 1], "positions": [1]},
    }


@pytest.fixture
def fast_config(tmp_path):
    from dense_prf.config import config_from_dict

    return config_from_dict(fast_config_dict(tmp_path / "out"))
