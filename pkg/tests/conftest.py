import numpy as np
import pytest

from cephaloscope import engine as E


@pytest.fixture(autouse=True)
def float64_engine():
    with E.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from verdicts import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
