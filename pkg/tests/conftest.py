import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; tests fill in ``ok`` and ``detail``."""
    entry = {"ok": False, "detail": "did not finish"}
    ACCEPTANCE[request.node.name] = entry
    return entry


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, e in sorted(ACCEPTANCE.items(), key=lambda kv: int(kv[0].split("_")[1])):
        terminalreporter.write_line(f"{'PASS' if e['ok'] else 'FAIL'}  {name}: {e['detail']}")
