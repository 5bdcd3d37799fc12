import os

import pytest
import torch

# one PASS/FAIL line per acceptance criterion, in declaration order
_CRITERIA: dict = {}


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], [])


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _CRITERIA[m.args[0]].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name, results in _CRITERIA.items():
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        tr.write_line(f"{status:8s} {name}")


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("DDG_OUTPUT_ROOT", os.fspath(tmp_path / "runs"))
    return tmp_path / "runs"
