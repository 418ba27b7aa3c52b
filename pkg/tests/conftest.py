import numpy as np
import pytest

from falcon_dehaze import imaging


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Canonical 16 + 4 pair synthetic corpus, written once per session."""
    return imaging.write_corpus(tmp_path_factory.mktemp("corpus"), seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
