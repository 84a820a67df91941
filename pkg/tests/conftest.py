import pytest

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """``verdict(label, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        print(line, flush=True)
        lines.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
