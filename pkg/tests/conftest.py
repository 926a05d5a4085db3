import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one summary line for the acceptance table printed at the end of the run."""

    def add(criterion: str, passed: bool, detail: str) -> None:
        line = f"criterion {criterion:>3}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
