import pytest

VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion failed."""
    def record(number, title, passed, detail=""):
        VERDICTS.append((number, title, "PASS" if passed else "FAIL", detail))
        assert passed, f"criterion {number} ({title}) failed: {detail}"
    return record


def skip_criterion(number, title, reason):
    VERDICTS.append((number, title, "SKIP", reason))
    pytest.skip(reason)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} | {detail}")
