import numpy as np
import pytest

from memloc import numerics as nx
from memloc.lm import ModelConfig, Sequence, TransformerLM

TINY = ModelConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=256, n_ctx=32)


def random_sequence(rng, length, prefix_len):
    return Sequence(tuple(rng.integer(256) for _ in range(length)), prefix_len)


@pytest.fixture
def tiny_model():
    return TransformerLM.init(TINY, nx.Rng(11), 0.1)


@pytest.fixture
def tiny_seq():
    return random_sequence(nx.Rng(12), 14, 5)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


# one PASS/FAIL line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion(capsys):
    def record(number, ok: bool, detail: str):
        line = f"ACCEPTANCE criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
