import numpy as np
import pytest

from typorec import data
from typorec.imgproc import GrayImage


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three instances (one per family), six 128x128 views each."""
    spec = data.SynthSpec(n_instances=3, views_per_instance=6, image_size=128, seed=7)
    return data.generate(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture(scope="session")
def collapse_dataset(tmp_path_factory):
    """Five instances by ten views, the size used for the collapse property."""
    spec = data.SynthSpec(n_instances=5, views_per_instance=10, image_size=128, seed=11)
    return data.generate(spec, tmp_path_factory.mktemp("collapse"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h=32, w=32):
    return GrayImage(rng.integers(0, 256, (h, w), dtype=np.uint8))


# ------------------------------------------------------ acceptance reporting
#
# Tests marked ``@pytest.mark.criterion(n, title)`` report one PASS/FAIL line
# each in the terminal summary; details come from ``record_property("detail")``.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    if rep.when == "call" or rep.failed:
        number, title = mark.args
        detail = dict(item.user_properties).get("detail", "")
        if rep.failed and rep.when != "call":
            detail = f"{rep.when} error: {rep.longrepr.reprcrash.message if hasattr(rep.longrepr, 'reprcrash') else ''}"
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
