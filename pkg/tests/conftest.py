import pytest

_RESULTS: list[str] = []


@pytest.fixture
def report(request):
    """``report(ok, detail)`` prints one PASS/FAIL line for an acceptance criterion and asserts ``ok``."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _report(ok: bool, detail: str = "") -> None:
        line = f"{request.node.name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        _RESULTS.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, detail

    return _report


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
