import numpy as np
import pytest

from nanoinfer.model import ModelConfig, ModelWeights, expected_shapes, init_random


@pytest.fixture(scope="session")
def tiny_weights():
    """2-layer d_model=32 model used by most unit tests."""
    return init_random(ModelConfig(n_layers=2, d_model=32, n_heads=2, max_seq_len=64), 0)


@pytest.fixture(scope="session")
def draft_weights():
    return init_random(ModelConfig(n_layers=2, d_model=64, n_heads=2), 1)


@pytest.fixture(scope="session")
def verifier_weights():
    return init_random(ModelConfig(n_layers=4, d_model=128, n_heads=4), 2)


def zero_weights(config: ModelConfig) -> ModelWeights:
    return ModelWeights(
        config=config,
        tensors={n: np.zeros(s, np.float32) for n, s in expected_shapes(config).items()},
    )


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" in report.nodeid:
                name = report.nodeid.split("::")[-1]
                lines.append((name, outcome.upper()))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, outcome in sorted(lines):
            terminalreporter.write_line(f"{outcome}: {name}")
