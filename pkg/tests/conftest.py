import numpy as np
import pytest
from hypothesis import settings

from unidiff.layout import new_layout
from unidiff.schedule import NoiseSchedule, linear_schedule

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def curved(T):
    x = np.arange(T + 1) / T
    return NoiseSchedule((1 - x) ** 2, x, plan="curved")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[[2, 2], [3, 2], [3, 2, 4]], ids=lambda s: "x".join(map(str, s)))
def small_layout(request):
    return new_layout(request.param)


@pytest.fixture(params=["linear", "curved"])
def schedule16(request):
    return linear_schedule(16) if request.param == "linear" else curved(16)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        _criteria[number] = (title, report.passed, report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, secs, detail = _criteria[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f} s)"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
