import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Print one PASS/FAIL line per acceptance criterion and keep it for the summary."""
    def _record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        ACCEPTANCE.append(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
