import numpy as np
import pytest

from eegmesh.corpus import ingest
from eegmesh.synthetic import write_synthetic_corpus

SMALL_MODEL = dict(widths=(4, 8), dense_units=16, hidden=8)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_synthetic_corpus(root, subjects=[1, 2, 3, 4], n_trials=6, rest_seconds=30)
    return root


@pytest.fixture(scope="session")
def synth_cache(synth_root, tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    ingest(synth_root, cache)
    return cache


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance criteria reporting -------------------------------------------

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry = _CRITERIA.setdefault(marker.args[0], [True, 0.0, ""])
        entry[1] += report.duration
        if report.outcome != "passed":
            entry[0] = False
            msg = str(getattr(report, "longrepr", "") or "")
            reason = getattr(report.longrepr, "reprcrash", None)
            entry[2] = reason.message.splitlines()[0] if reason is not None else msg.splitlines()[-1:]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, secs, why) in _CRITERIA.items():
        line = f"{'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f}s)"
        if not ok and why:
            line += f"  -- {why}"
        terminalreporter.write_line(line)
