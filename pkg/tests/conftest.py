import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record and print one line per acceptance criterion; returns ``ok``."""

    def record(number, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        _VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
