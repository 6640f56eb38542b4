"""Per-criterion PASS/FAIL summary for the acceptance suite."""

from collections import defaultdict

_OUTCOMES: dict[int, list[bool]] = defaultdict(list)
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _TITLES[number] = title
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _OUTCOMES[number].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        results = _OUTCOMES[number]
        verdict = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {_TITLES[number]} ({sum(results)}/{len(results)} checks)")
