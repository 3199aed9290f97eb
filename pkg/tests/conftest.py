import numpy as np
import pytest

from tsp_transformer.model import ModelConfig, TSPModel
from tsp_transformer.tsp import generate, stack

TINY = ModelConfig(d=8, heads=1, enc_layers=1, dec_layers=1, d_ff=16)
SMALL = ModelConfig(d=16, heads=2, enc_layers=2, dec_layers=2, d_ff=32)


def make_model(config=SMALL, seed=0, dtype=np.float64, n=8):
    model = TSPModel.init(config, seed, dtype)
    model.seed_stats(stack(generate(n, 16, 10_000 + seed)))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return make_model()


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    """Log one acceptance verdict; the summary hook prints them after the run."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
