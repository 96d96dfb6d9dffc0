import helpers


def pytest_terminal_summary(terminalreporter):
    if not helpers.CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in helpers.CRITERIA:
        terminalreporter.write_line(line)
