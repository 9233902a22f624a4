import numpy as np
import pytest
import torch

from csaw.backbone import StandInBackbone
from csaw.data import generate_synthetic_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def standin():
    return StandInBackbone(seed=0)


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """4 classes x 24 images; enough for 16 shots plus held-out samples."""
    root = tmp_path_factory.mktemp("data") / "syn"
    return generate_synthetic_dataset(root, 4, 24, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call":
        entry["ran"] = True
    if failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {e['title']}")
