import pytest

# acceptance checks append (label, passed, detail) here; printed after the run
VERDICTS = []


@pytest.fixture
def verdict():
    def record(label, passed, detail=""):
        VERDICTS.append((label, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for label, passed, detail in VERDICTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
