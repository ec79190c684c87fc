import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion_lines():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
