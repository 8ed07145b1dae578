import pytest

from . import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.LINES, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        terminalreporter.write_line(acceptance_log.LINES[n])


@pytest.fixture
def criterion():
    return acceptance_log.record
