import pytest

RESULTS = {}


@pytest.fixture
def record():
    """Store a one-line verdict for the terminal summary."""

    def _record(key, passed, detail):
        RESULTS[key] = (bool(passed), detail)
        print(f"{key}: {'PASS' if passed else 'FAIL'} {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k.split()[1])):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
