import pytest

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def announce(request, capsys):
    """Print one ``criterion N: PASS|FAIL`` line and keep it for the session summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
