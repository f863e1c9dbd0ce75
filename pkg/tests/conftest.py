import pytest

_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one ``criterion N: PASS|FAIL ...`` line per acceptance check."""
    return request.config.stash.setdefault(_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
