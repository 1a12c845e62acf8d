import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = dict(report.user_properties).get("detail", "")
    prev = _CRITERIA.get(name)
    if report.failed or report.skipped:
        _CRITERIA[name] = ("FAIL" if report.failed else "SKIP", detail or (prev[1] if prev else ""))
    elif report.when == "call" and prev is None:
        _CRITERIA[name] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        status, detail = _CRITERIA[name]
        number = int(name.split("_")[2])
        title = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")
