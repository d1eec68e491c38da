import sys
from pathlib import Path

import pytest

# lets test modules import the shared oracles
sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    num, title = mark.args
    if rep.when == "call" or rep.failed:
        verdict = "PASS" if rep.passed else "FAIL"
        _criteria[num] = (title, verdict, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, verdict, dur = _criteria[num]
        terminalreporter.write_line(f"criterion {num}: {verdict}  ({dur:.1f} s)  {title}")
