import numpy as np
import pytest

from apct.geometry import gen_shape
from apct.model import ModelConfig, init_params

# acceptance criterion number -> (title, outcome)
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when not in ("setup", "call"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    number, title = crit
    entry = _CRITERIA.setdefault(number, [title, "PASS"])
    if report.failed:
        entry[1] = "FAIL"
    elif report.skipped and entry[1] == "PASS":
        entry[1] = "SKIP"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_tokens=8, group_size=8, dim=16, heads=2, depths=[1, 1, 1], k=2)


@pytest.fixture(scope="session")
def tiny_clouds():
    return [gen_shape(c, 100 + c, 64) for c in range(8)]


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3)
