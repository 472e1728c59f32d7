import numpy as np
import pytest

from pwdft import spectral as sp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cell():
    return sp.Cell(10.0)


def pytest_terminal_summary(terminalreporter):
    from _util import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
