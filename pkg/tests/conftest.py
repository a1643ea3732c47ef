import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def report():
    """Collects one PASS/FAIL line per acceptance criterion."""
    def add(label: str, passed: bool, text: str):
        _LINES.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {text}")
        return passed
    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
