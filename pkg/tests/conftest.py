"""Collects the acceptance verdicts and prints one line per criterion."""

_verdicts: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.skipped):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = props.get("detail", "")
        if report.skipped and not detail:
            detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
        _verdicts.append((props["criterion"], outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_verdicts, key=lambda v: int(v[0].split()[0])):
        terminalreporter.write_line(f"{outcome}  criterion {name}" + (f"  ({detail})" if detail else ""))
