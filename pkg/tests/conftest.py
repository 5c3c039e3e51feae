import gzip
import shutil
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
NAMES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
         "test-images-idx3-ubyte", "test-labels-idx1-ubyte"]


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Raw IDX files for 5,000 MNIST digits (4,000 train, 1,000 test)."""
    out = tmp_path_factory.mktemp("mnist")
    for name in NAMES:
        with gzip.open(DATA / f"mnist5k-{name}.gz") as src, open(out / name, "wb") as dst:
            shutil.copyfileobj(src, dst)
    return out


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from vaelab.data import load_idx
    return (load_idx(mnist_dir / NAMES[0], mnist_dir / NAMES[1]),
            load_idx(mnist_dir / NAMES[2], mnist_dir / NAMES[3]))


CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion id")


@pytest.fixture
def measured(request):
    """Append human-readable measurements to the criterion summary line."""
    notes = []
    request.node.user_properties.append(("measured", notes))
    return notes.append


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = CRITERIA.get(report.nodeid)
    if marker is None:
        return
    notes = [n for k, v in report.user_properties if k == "measured" for n in v]
    ok = report.passed
    entry = CRITERIA_RESULTS.setdefault(marker, [True, []])
    entry[0] = entry[0] and ok
    entry[1].extend(notes)


CRITERIA_RESULTS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            CRITERIA[item.nodeid] = m.args


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (ok, notes) in sorted(CRITERIA_RESULTS.items()):
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
