import numpy as np
import pytest

_ACCEPTANCE = {}


def _record(number, label, ok, detail=""):
    _ACCEPTANCE[(number, label)] = (bool(ok), detail)


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion for the summary table."""
    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for (number, label), (ok, detail) in sorted(_ACCEPTANCE.items()):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {number:>2}. {label}"
        if detail:
            line += f"  ({detail})"
        tr.write_line(line)
