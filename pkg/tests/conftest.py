import pytest

from sdlab.datasets import make_blobs, make_rings, split
from sdlab.nn import TrainConfig, init_model, train

from helpers import MLP


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(3, 100, 2, 0.5, 7)


@pytest.fixture(scope="session")
def blob_split(blobs):
    return split(blobs, 0.2, 0)


@pytest.fixture(scope="session")
def rings():
    return make_rings(2, 200, 0.05, 3)


@pytest.fixture(scope="session")
def trained_blob_model(blob_split):
    tr, _ = blob_split
    return train(init_model(MLP, 42), tr, TrainConfig(30, 16, 0.05, 0.9, 0)).model


@pytest.fixture(scope="session")
def blob_syn(blob_split):
    from sdlab.distill import DistillConfig, distill

    tr, _ = blob_split
    return distill(tr, MLP, 10, DistillConfig(outer_steps=100))


# -- acceptance reporting ----------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title, detail = _criteria[number]
        line = f"[{verdict}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
