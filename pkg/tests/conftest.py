import pytest

_CRITERIA = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
