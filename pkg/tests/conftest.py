import numpy as np
import pytest

# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def record_criterion(tag: str, ok: bool, detail: str) -> None:
    line = f"[{tag}][{'PASS' if ok else 'FAIL'}] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
