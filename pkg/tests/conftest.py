import numpy as np
import pytest

from fedshield.corpus import LocalDataset, read_corpus, split_corpus
from fedshield.model import Architecture


@pytest.fixture(scope="session")
def sentences():
    return read_corpus()


@pytest.fixture(scope="session")
def split(sentences):
    return split_corpus(sentences, vocab_size=50, n_users=100)


@pytest.fixture
def tiny_arch():
    return Architecture(vocab_size=5, embed_dim=3)


@pytest.fixture
def tiny_data():
    return LocalDataset("u0", [np.array([1, 2, 3, 4]), np.array([2, 0, 1])])


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, passed, detail)."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
