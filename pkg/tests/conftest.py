import numpy as np
import pytest

from olora_lab.data import CorpusConfig
from olora_lab.model import ModelSpec, TinyLM
from olora_lab.train import pretrain


@pytest.fixture(scope="session")
def spec():
    return ModelSpec()


@pytest.fixture(scope="session")
def corpus():
    return CorpusConfig()


@pytest.fixture(scope="session")
def pretrained(spec, corpus):
    """Default pre-trained base model (shared, never mutated)."""
    return pretrain(spec, corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_model64():
    return TinyLM.init(ModelSpec(precision=64), seed=3)


ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict; printed in the terminal summary."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
