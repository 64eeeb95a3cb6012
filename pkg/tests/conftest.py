"""Prints one pass/fail line per acceptance criterion at the end of the run."""

_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        outcome = "PASS" if report.passed else "FAIL"
        if report.skipped:
            outcome = "SKIP"
        _results[props["criterion"]] = (outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_results, key=lambda n: int(n.split()[0][1:])):
        outcome, detail = _results[name]
        line = f"{outcome}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
