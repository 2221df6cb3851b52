from __future__ import annotations

import numpy as np
import pytest

from mgsr import autodiff as ad
from mgsr.lm import ModelConfig

ACCEPTANCE_LINES: list[str] = []


class TableLM:
    """Position-and-last-token lookup model: ``table[t, ids[t]]`` is the next-token distribution.

    Quacks like ``TransformerLM`` for everything generation and SCRG need.
    """

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)
        T, M, M2 = self.table.shape
        assert M == M2
        self.config = ModelConfig(vocab_size=M, context_len=max(T, 8), n_layers=1, n_heads=1, d_model=4,
                                  d_ff=4)

    def probs(self, ids):
        ids = np.asarray(ids)
        B, T = ids.shape
        out = self.table[np.arange(T)[None, :], ids]
        return ad.Tensor(out)

    def logits(self, ids):
        return ad.Tensor(np.log(self.probs(ids).data))


def one_hot_table(T: int, M: int, transitions: dict, default: int = 0, conf: float = 0.97):
    """``transitions[(t, last)] = next`` with probability ``conf``; anything else goes to ``default``."""
    rest = (1.0 - conf) / (M - 1)
    table = np.full((T, M, M), rest)
    for t in range(T):
        for last in range(M):
            nxt = transitions.get((t, last), default)
            table[t, last, nxt] = conf
    return table


def random_table(rng: np.random.Generator, T: int, M: int, sharp: float = 3.0):
    logits = rng.normal(0, sharp, size=(T, M, M))
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def random_simplex(rng: np.random.Generator, M: int, size=None, concentration: float = 1.0):
    shape = (M,) if size is None else (*np.atleast_1d(size), M)
    x = rng.gamma(concentration, size=shape)
    x = np.maximum(x, 1e-300)
    return x / x.sum(-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
