import json
import time
from pathlib import Path

import pytest

from dcmoe import curriculum
from reference import measure

BASELINE = Path(__file__).parent / "baselines" / "reference_seed0.json"


@pytest.fixture(scope="session")
def smoke_cfg():
    return curriculum.preset("smoke", seed=0)


@pytest.fixture(scope="session")
def smoke_data(smoke_cfg):
    return curriculum.build_datasets(smoke_cfg.manifest)


@pytest.fixture(scope="session")
def smoke_run(smoke_cfg, smoke_data, tmp_path_factory):
    """The smoke curriculum (plus dense baseline), persisted to a temp directory."""
    out = tmp_path_factory.mktemp("smoke_run")
    result = curriculum.run_curriculum(smoke_cfg, smoke_data, out_dir=out, with_baseline=True)
    return result, out


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """The full-preset reference curriculum at seed 0 (several minutes) and its measurements."""
    cfg = curriculum.preset("full", seed=0)
    start = time.time()
    result = curriculum.run_curriculum(cfg, out_dir=tmp_path_factory.mktemp("full"), with_baseline=True)
    print(f"\nfull preset curriculum: {time.time() - start:.0f} s")
    return result, measure(result)


@pytest.fixture(scope="session")
def baseline():
    return json.loads(BASELINE.read_text())


# ------------------------------------------------- acceptance criteria report

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "passed": 0})
    if rep.failed:
        entry["failed"] = True
    elif rep.when == "call" and rep.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "FAIL" if e["failed"] or not e["passed"] else "PASS"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']}")
