import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record an acceptance verdict: ``criterion(n, passed, detail)``; the test still asserts."""

    def record(number, passed, detail):
        _CRITERIA[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
