import numpy as np
import pytest

from krul.engine import ModelConfig, build_model
from krul.strategy import CompressionStrategy


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelConfig(n_layers=4, n_heads=2, head_dim=8, d_model=16, vocab_size=50, seed=3))


@pytest.fixture(scope="session")
def deep_model():
    return build_model(ModelConfig(n_layers=6, n_heads=2, head_dim=4, d_model=8, vocab_size=40, seed=11))


def random_tokens(rng, n, vocab):
    return [int(t) for t in rng.integers(0, vocab, n)]


def pairs_strategy(pairs):
    return CompressionStrategy(tuple(pairs), tuple(0.0 for _ in pairs))


def causal_rows(rng, heads, rows, width, offset=0):
    """Random row-stochastic causal block; query r sees keys [0, offset + r]."""
    out = np.zeros((heads, rows, width), dtype=np.float32)
    for r in range(rows):
        w = rng.random((heads, offset + r + 1)) + 1e-3
        out[:, r, : offset + r + 1] = w / w.sum(axis=1, keepdims=True)
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def acceptance(criterion: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
