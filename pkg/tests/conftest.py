import pytest

from deepnarrow.runs import load_runs


@pytest.fixture(scope="session")
def bundled():
    return load_runs()


@pytest.fixture(scope="session")
def by_name(bundled):
    return {r.name: r for r in bundled}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
