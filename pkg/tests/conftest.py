_CRITERIA: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _CRITERIA.extend(v for k, v in report.user_properties if k == "criterion")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
