import pytest

_ACCEPTANCE_LINES: list[str] = []


class AcceptanceRecorder:
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(self, criterion: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed


@pytest.fixture
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
