import numpy as np
import pytest

# filled by test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
