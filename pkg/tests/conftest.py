import pytest

# (number, title, passed, detail) for each acceptance criterion, filled by test_acceptance
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = (number, title, bool(passed), detail)
        ACCEPTANCE_RESULTS.append(line)
        print(_format(line))
        return bool(passed)
    return record


def _format(line):
    number, title, passed, detail = line
    return f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(_format(line))
