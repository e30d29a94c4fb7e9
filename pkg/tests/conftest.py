import numpy as np
import pytest

from tumorloc import synth

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.passed else "FAIL"
        _criteria[number] = (verdict, title)
        print(f"\n[acceptance {number}] {verdict}: {title}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        verdict, title = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}  {verdict}  {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# a small phantom: 32^3 grid with radii that fit its infratentorial zone
SMALL_PHANTOM = dict(dims=(32, 32, 32), radius_min=1.5, radius_max=3.5)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 fusion + 20 mutation cases on a 32^3 grid, written once per session."""
    out = tmp_path_factory.mktemp("small_dataset")
    cfg = synth.PhantomConfig(n_fusion=20, n_mutation=20, seed=3, **SMALL_PHANTOM)
    manifest = synth.generate_dataset(cfg, out)
    return out, manifest
