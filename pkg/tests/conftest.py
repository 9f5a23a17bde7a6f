import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the verdict so tests can assert on it."""
    def record(cid: str, ok: bool, detail: str) -> bool:
        line = f"{cid} {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
