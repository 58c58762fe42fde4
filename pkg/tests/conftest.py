import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, ok, detail)."""
    def record(n, ok, detail=""):
        line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
