import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "detail": [], "seconds": 0.0})
    entry["passed"] = entry["passed"] and rep.passed
    entry["seconds"] += rep.duration
    if detail and detail not in entry["detail"]:
        entry["detail"].append(detail)
    if rep.failed:
        entry["detail"].append(f"failed in {rep.when}")
    if rep.skipped:
        entry["detail"].append("skipped")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["passed"] else "FAIL"
        extra = f" | {'; '.join(e['detail'])}" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number}: {status} {e['title']} ({e['seconds']:.1f}s){extra}")
