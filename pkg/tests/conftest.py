import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def add(result):
        ACCEPTANCE_LINES.append(result.line())
        print(result.line())
        return result
    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
