import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from laylora.experiments import DESK_MODEL, PretrainConfig, pretrain_backbone, synthetic_tokenizer
from laylora.model import ModelConfig, Transformer

settings.register_profile("laylora", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("laylora")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=30, n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=24, seed=0)


@pytest.fixture
def tiny_model(tiny_config):
    return Transformer(tiny_config).freeze()


@pytest.fixture(scope="session")
def synth_tok():
    return synthetic_tokenizer()


@pytest.fixture(scope="session")
def desk_backbone(synth_tok):
    """The copy-task backbone every desk-scale harness shares (pretrained once per session)."""
    cfg = ModelConfig(vocab_size=len(synth_tok), **DESK_MODEL)
    return pretrain_backbone(synth_tok, cfg, PretrainConfig())


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
