import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "spct", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("spct")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_acceptance: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not mark.args:
        return
    num, title = mark.args[0], mark.args[1]
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when == "call" or failed:
        prev = _acceptance.get(num, (title, "PASS"))[1]
        _acceptance[num] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance):
        title, verdict = _acceptance[num]
        terminalreporter.write_line(f"{verdict} {num:2d} {title}")
