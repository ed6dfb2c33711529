import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpa import ModelConfig, TargetSpec, build_random, forward  # noqa: E402
from dpa.zoo import zero_model  # noqa: E402

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=12, vocab_size=11)
SMALL = ModelConfig(n_layers=2, n_heads=4, d_model=32, d_ffn=48, vocab_size=24)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_weights():
    return build_random(TINY, seed=3)


@pytest.fixture
def small_weights():
    return build_random(SMALL, seed=11)


@pytest.fixture
def zero_weights():
    return zero_model(SMALL, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_case(config, seed, T=6):
    """A random model, token sequence and target for the given config."""
    r = np.random.default_rng(seed)
    weights = build_random(config, seed)
    tokens = [int(t) for t in r.integers(0, config.vocab_size, size=T)]
    spec = TargetSpec(int(r.integers(0, config.vocab_size)), int(r.integers(0, T)))
    return weights, tokens, spec, forward(tokens, weights).cache


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
