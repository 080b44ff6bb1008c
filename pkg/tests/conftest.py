from _gate import RESULTS, line


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(RESULTS):
        terminalreporter.write_line(line(entry))
