import numpy as np
import pytest
import torch

from steerlab.lm.model import LmConfig, ToyLm
from steerlab.lm.vocab import DEFAULT_VOCAB
from steerlab.sae import SaeModel

torch.set_num_threads(1)

# acceptance criteria register their outcome here; printed at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, msg = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture
def tiny_lm():
    cfg = LmConfig(vocab_size=len(DEFAULT_VOCAB), n_layers=2, d_model=16, n_heads=2, d_mlp=32, context_window=128)
    return ToyLm(cfg, seed=3)


@pytest.fixture
def tiny_sae(tiny_lm):
    return SaeModel(tiny_lm.cfg.d_model, 32, lambda_l1=0.01, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
