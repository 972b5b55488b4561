import numpy as np
import pytest

from rkr.data import generate_synthetic_tasks
from rkr.model import build_reference_net
from rkr.trainer import TrainConfig

# The five-task conflict suite used by the training tests and the acceptance gate.
FIVE_TASK = dict(n_tasks=5, classes_per_task=2, input_shape=(2,), separation=6.0, conflict_mode=True, seed=0)
FIVE_TASK_NET = dict(preset="tiny-mlp", input_shape=(2,), hidden=32, feature_dim=4)

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    n, text = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[n] = (text, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result()._criterion = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        text, status = _criteria[n]
        terminalreporter.write_line(f"[{status}] criterion {n:>2}: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def five_tasks():
    return generate_synthetic_tasks(**FIVE_TASK)


@pytest.fixture(scope="session")
def five_task_spec():
    return build_reference_net(**FIVE_TASK_NET)


@pytest.fixture(scope="session")
def default_train():
    return TrainConfig()
