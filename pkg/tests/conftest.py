import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    results = item.config.stash[_RESULTS]
    n = marker.args[0]
    # a setup failure or a failed call overrides an earlier entry
    if n not in results or status != "PASS":
        results[n] = (status, item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, name, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name}  {detail}")
