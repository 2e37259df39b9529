import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; the line is printed at session end."""
    def record(cid: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} C{cid} {title}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)
