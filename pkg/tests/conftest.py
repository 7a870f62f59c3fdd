import numpy as np
import pytest

from perk.signals import reference_acquisition

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acq():
    return reference_acquisition()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record():
    """Store one acceptance line per criterion; printed in the terminal summary."""

    def _rec(key, ok, detail):
        _ACCEPTANCE[key] = (bool(ok), detail)
        print(f"{key}: {'PASS' if ok else 'FAIL'} | {detail}")

    return _rec


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
