import numpy as np
import pytest
import torch

from slotdiff.backbone import ModelConfig, build_model


def small_config(**kw) -> ModelConfig:
    base = dict(vocab_size=24, n_layers=2, n_heads=4, d_model=32, d_ff=64, max_position=128)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def model(cfg):
    return build_model(cfg, seed=0).eval()


@pytest.fixture
def model64(cfg):
    return build_model(cfg, seed=0, dtype=torch.float64).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed at the end of the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
