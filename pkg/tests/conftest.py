import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, title, status, detail)``; status is True, False or 'SKIP'."""

    def record(number, title, status, detail=""):
        _ACCEPTANCE.append((number, title, status, detail))
        return status

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        word = "SKIP" if status == "SKIP" else ("PASS" if status else "FAIL")
        terminalreporter.write_line(f"[{word}] {number}. {title}: {detail}")
