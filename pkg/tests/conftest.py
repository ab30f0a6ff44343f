import sys
from collections import OrderedDict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from affectfusion.featurestore import SyntheticSpec, generate_synthetic, load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def emi_pack(tmp_path_factory):
    root = tmp_path_factory.mktemp("emi_pack")
    generate_synthetic(SyntheticSpec(task="emi", n_samples={"train": 12, "val": 8}, seed=3), root)
    return root


@pytest.fixture(scope="session")
def bah_pack(tmp_path_factory):
    root = tmp_path_factory.mktemp("bah_pack")
    spec = SyntheticSpec(task="bah", n_samples={"train": 6, "val": 4}, duration_s=(20.0, 30.0), seed=5)
    generate_synthetic(spec, root)
    return root


@pytest.fixture
def emi_dataset(emi_pack):
    return load_dataset(emi_pack)


@pytest.fixture
def bah_dataset(bah_pack):
    return load_dataset(bah_pack)


# criterion number -> {"title", "passed", "seconds", "notes"}
_CRITERIA: "OrderedDict[int, dict]" = OrderedDict()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "notes": []})
    entry["seconds"] += rep.duration
    if not rep.passed:
        entry["passed"] = False
        entry["notes"].append(item.name)
    for key, value in item.user_properties:
        if key == "detail":
            entry["notes"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] else "FAIL"
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['title']} ({e['seconds']:.1f} s){notes}")
