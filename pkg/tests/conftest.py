import numpy as np
import pytest

import acceptance_log
from tomsense.model import ModelConfig, init_checkpoint


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32, dtype="float64")


@pytest.fixture
def tiny_ckpt(tiny_cfg):
    return init_checkpoint(tiny_cfg, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_log.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
