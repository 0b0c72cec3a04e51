import pytest

_LINES = []


@pytest.fixture
def record():
    """Print one PASS/FAIL line and keep it for the end-of-run summary."""

    def _record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        _LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
