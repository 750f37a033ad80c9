import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``criterion(n, passed, detail)``; the verdicts print at the end of the run."""

    def record(n, passed, detail):
        CRITERIA[n] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
