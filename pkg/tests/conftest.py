from __future__ import annotations

import copy
import json
from pathlib import Path

import pytest

from fedsim.blazebench.config import config_from_dict, prepare_workload

FIXTURES = Path(__file__).parent / "fixtures"

SMALL_CONFIG = {
    "base_seed": 42,
    "model": {"kind": "mlp", "input_shape": [1, 8, 8], "n_classes": 10, "dropout_rate": 0.1},
    "dataset": {
        "synthetic": {"n_classes": 10, "per_class": 200, "test_per_class": 20, "shape": [1, 8, 8], "seed": 7}
    },
    "partition": {"classes_per_client": 2, "samples_per_client": 100},
    "rounds": 3,
    "clients_total": 20,
    "clients_per_round": 5,
    "epochs": 2,
    "batch_size": 25,
    "lr": 0.05,
    "engine": {"parallelism": 2},
}

# Desk-scale stand-in for the 100-client / two-classes / 500-sample workload.
REFERENCE_CONFIG = {
    "base_seed": 42,
    "model": {"kind": "mlp", "input_shape": [1, 8, 8], "n_classes": 10, "dropout_rate": 0.1},
    "dataset": {
        "synthetic": {"n_classes": 10, "per_class": 5000, "test_per_class": 100, "shape": [1, 8, 8], "seed": 7}
    },
    "partition": {"classes_per_client": 2, "samples_per_client": 500},
    "rounds": 5,
    "clients_total": 100,
    "clients_per_round": 10,
    "epochs": 5,
    "batch_size": 50,
    "lr": 0.05,
    "engine": {"parallelism": 8, "transport": "shared_memory", "collection": "sampled_order"},
}


def merged(base: dict, **overrides) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


@pytest.fixture(scope="session")
def golden() -> dict:
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture(scope="session")
def small_cfg():
    return config_from_dict(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_workload(small_cfg):
    return prepare_workload(small_cfg)


@pytest.fixture
def write_config(tmp_path):
    def write(obj: dict, name: str = "config.json") -> Path:
        path = tmp_path / name
        body = dict(obj)
        body.setdefault("output_dir", str(tmp_path / "out"))
        path.write_text(json.dumps(body))
        return path

    return write


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] = entry["passed"] and report.passed
    if report.when == "call":
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] else "FAIL"
        details = f"  [{', '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{details}")
