import pytest

_RESULTS = {}


@pytest.fixture
def report(request):
    """Record a one-line verdict for an acceptance criterion; printed in the summary."""

    def record(number, ok, detail):
        _RESULTS[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number])
