import pytest

from gaitenc.benchmark import RunCache

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store a criterion outcome for the end-of-run summary, then assert it."""
    ACCEPTANCE[criterion] = (ok, detail)
    assert ok, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def bench():
    return RunCache()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"[----] criterion {n:>2}: not run or raised before a verdict")
            continue
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
