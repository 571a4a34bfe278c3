import pytest

_RESULTS = {}


class AcceptanceRecorder:
    def __init__(self, key):
        self.key = key

    def check(self, ok, detail):
        prev = _RESULTS.get(self.key)
        if prev is None or prev[0]:
            # a criterion split over several tests keeps its first failure
            _RESULTS[self.key] = (bool(ok), detail)
        print(f"{self.key} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{self.key}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return AcceptanceRecorder(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key): acceptance criterion reported in the summary")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (len(k), k)):
        ok, detail = _RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    key = marker.args[0]
    if report.failed and (key not in _RESULTS or _RESULTS[key][0]):
        # an exception escaped before (or after) the criterion's own verdict
        _RESULTS[key] = (False, f"{item.name} raised {call.excinfo.typename}" if call.excinfo else item.name)
