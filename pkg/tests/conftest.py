import numpy as np
import pytest

from esci_rank.dataset import QueryProductRecord, generate_synthetic
from esci_rank.labels import EsciLabel
from esci_rank.model import ModelConfig, init_params
from esci_rank.tokenizer import TokenizerConfig


@pytest.fixture
def three_records():
    return [
        QueryProductRecord("q1", "p1", "ipad case", "Smart Folio", "fits 11 inch", "magnetic", "Apple", "black", "en", EsciLabel.EXACT),
        QueryProductRecord("q1", "p2", "ipad case", "Sleeve", "", "soft", "Acme", "", "en", EsciLabel.SUBSTITUTE,
                           soft_label=(0.1, 0.7, 0.1, 0.1)),
        QueryProductRecord("q2", "p1", "zapato", "zapato rojo", "", "", "", "rojo", "es", None),
    ]


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(600, seed=11)


@pytest.fixture
def tiny_tokenizer():
    return TokenizerConfig(vocab_size=512, max_len=24)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(vocab_size=512, embed_dim=8, hidden_dims=(12, 12), seed=3)


@pytest.fixture
def tiny_params(tiny_model_cfg):
    return init_params(tiny_model_cfg)


def random_params(cfg, seed, scale=0.5):
    """Parameters away from the initialization (non-zero biases and pool logits)."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg)
    for k in p.names():
        p[k] = rng.normal(scale=scale, size=p[k].shape)
    return p


ACCEPTANCE = []  # verdict lines appended by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
