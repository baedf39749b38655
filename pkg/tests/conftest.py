import os
from pathlib import Path

import numpy as np
import pytest

from clbench.data import MNIST_FILES


def _has_mnist(root):
    root = Path(root)
    return all(any((root / (n + ext)).exists() for ext in ("", ".gz")) for pair in MNIST_FILES.values() for n in pair)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """Full MNIST from CLBENCH_DATA when present, otherwise the 5k subset shipped with mlxtend."""
    env = os.environ.get("CLBENCH_DATA")
    if env and _has_mnist(env):
        return Path(env)
    pytest.importorskip("mlxtend")
    from clbench.data import export_mlxtend_mnist

    return export_mlxtend_mnist(tmp_path_factory.mktemp("mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report: one PASS/FAIL line per criterion ----------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test decides")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    item_marker = getattr(report, "criterion", None)
    if item_marker is not None:
        n, title = item_marker
        ok = report.outcome == "passed"
        prev = _CRITERIA.get(n, (title, True, ""))
        detail = getattr(report, "criterion_detail", "")
        _CRITERIA[n] = (title, prev[1] and ok, "; ".join(d for d in (prev[2], detail) if d))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = (m.args[0], m.args[1])
        rep.criterion_detail = item.stash.get(DETAIL_KEY, "")


DETAIL_KEY = pytest.StashKey[str]()


@pytest.fixture
def detail(request):
    """Call with a string to attach a one-line measurement to the criterion's report line."""
    def put(text):
        request.node.stash[DETAIL_KEY] = text
    return put


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, text = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{text}]" if text else ""))
