import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        cid, detail = props["criterion"]
        prev = _criteria.get(cid, ("PASS", detail))[0]
        status = "FAIL" if report.failed or prev == "FAIL" else "PASS"
        _criteria[cid] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        status, detail = _criteria[cid]
        terminalreporter.write_line(f"{cid:>4} {status}  {detail}")
