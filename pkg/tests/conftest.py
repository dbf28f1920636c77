import numpy as np
import pytest

from spoofmamba.model import ModelConfig, SpoofMamba


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bi_model():
    return SpoofMamba(ModelConfig())


@pytest.fixture(scope="session")
def clip_pair():
    """Two short random clips at the model's input length."""
    r = np.random.default_rng(7)
    return (0.1 * r.standard_normal((2, 64600))).astype(np.float32)


ACCEPTANCE = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    """Store one criterion verdict; the lines are repeated in the terminal summary."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
