import numpy as np
import pytest

from dca.adapter import init_adapters
from dca.model import ModelConfig, init_params


@pytest.fixture
def small_cfg():
    return ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=11, max_seq_len=16, mlp_dim=12,
                       adapter_layers=2, adapter_len=4, general_len=2, causal_layers=2)


@pytest.fixture
def small_model(small_cfg):
    return small_cfg, init_params(small_cfg, seed=3)


def random_tokens(cfg, batch, seq, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch, seq))


def open_gates(adapters, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for layer in adapters.layers:
        layer.gate.data[:] = rng.normal(0.0, scale, size=layer.gate.shape)
        layer.general.data[:] = rng.normal(0.0, 0.5, size=layer.general.shape)
        layer.specific.data[:] = rng.normal(0.0, 0.5, size=layer.specific.shape)
    return adapters


@pytest.fixture
def gated_adapters(small_cfg):
    return open_gates(init_adapters(small_cfg, seed=5))


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
