import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def check(number: int, name: str, checks: dict, detail: str = ""):
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f" ({detail})"
        if failed:
            line += " failed: " + ", ".join(failed)
        request.config.stash[_LINES].append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
