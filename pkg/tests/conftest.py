import pytest

from pullsim.model import PoolSpec, SystemConfig, two_pool_example

_ACCEPTANCE_LINES = []


@pytest.fixture
def two_pool():
    return two_pool_example()


@pytest.fixture
def single_pool():
    return SystemConfig(lam=0.5, pools=(PoolSpec(beta=1.0, mu=1.0),))


@pytest.fixture
def verdict():
    """Collects one pass/fail line per acceptance criterion for the summary."""

    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
