import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "detail": ""})
    if failed:
        entry["ok"] = False
    for key, value in item.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}"
        if e["detail"]:
            line += f" [{e['detail']}]"
        terminalreporter.write_line(line)
