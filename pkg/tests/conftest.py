"""Collects acceptance verdicts and prints them as a block at the end of the run."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
