import pytest

from swprecond.swmodel import GridSpec


@pytest.fixture(scope="session")
def grid4():
    return GridSpec(4, 4)


@pytest.fixture(scope="session")
def grid8():
    return GridSpec(8, 8)


@pytest.fixture(scope="session")
def grid16():
    return GridSpec(16, 16)


@pytest.fixture(scope="session")
def env16():
    from swprecond.config import default_scenario, environment

    return environment(default_scenario())


SMALL = {"grid": {"nx": 8, "ny": 8}, "spinup_days": 5.0, "climatology": {"days": 2.0, "every": 5},
         "model": {"steps_per_window": 10}}


@pytest.fixture(scope="session")
def small_scenario():
    from swprecond.config import Scenario

    return Scenario.from_dict(SMALL)


@pytest.fixture(scope="session")
def env8(small_scenario):
    from swprecond.config import environment

    return environment(small_scenario)


# --- one summary line per acceptance criterion ---------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    ok = _criteria.get(n, (True, title))[0]
    if report.failed or (report.when == "call" and report.skipped):
        ok = False
    _criteria[n] = (ok, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, title = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}")
