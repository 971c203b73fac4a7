import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
