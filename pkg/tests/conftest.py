import pytest

_MEASURED: dict[str, str] = {}


@pytest.fixture
def gate(request):
    """Record the measured quantities behind an acceptance verdict."""

    def note(text: str) -> None:
        _MEASURED[request.node.nodeid] = text

    return note


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py::test_criterion_" in getattr(rep, "nodeid", ""):
                outcomes[rep.nodeid] = "FAIL" if status != "passed" else outcomes.get(rep.nodeid, "PASS")
    if not outcomes:
        return
    terminalreporter.section("acceptance")
    for nodeid in sorted(outcomes):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{outcomes[nodeid]:4s}  {name}  {_MEASURED.get(nodeid, '')}")
