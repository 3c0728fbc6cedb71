"""Collects the acceptance-criterion verdicts and prints them after the run."""

_verdicts: list[tuple[int, str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            number, title, detail = value
            _verdicts.append((number, "PASS" if report.passed else "FAIL", title, detail))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, title, detail in sorted(_verdicts):
        terminalreporter.write_line(f"criterion {number:>2}  {verdict}  {title}: {detail}")
