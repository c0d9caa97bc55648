"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        ACCEPTANCE[crit] = ("PASS" if report.passed else "FAIL",
                            dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"criterion {crit}: {verdict}  {detail}".rstrip())
