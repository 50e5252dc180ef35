import pytest

_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed or report.skipped:
        entry["seen"] = True
        if not report.passed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        entry = _results[n]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {entry['title']}")
