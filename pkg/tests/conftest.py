import pytest

_ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)``: log one acceptance line (printed again in the summary)."""
    def rec(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}")
    return rec


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}")
