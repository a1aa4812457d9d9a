import numpy as np
import pytest
import torch

from bdlm.model import ModelConfig, build_model


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0, precision="single")


@pytest.fixture
def tiny_model64():
    return build_model(tiny_config(), seed=0, precision="double")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
