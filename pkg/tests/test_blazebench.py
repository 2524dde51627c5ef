import csv
import json

import pytest

from fedsim.blazebench import harness
from fedsim.blazebench.cli import main
from fedsim.blazebench.config import ConfigError, config_from_dict, load_config
from fedsim.datahub import load_partition

from conftest import SMALL_CONFIG, merged


def _with(**override):
    # The dataset section is replaced wholesale since it holds exactly one source.
    dataset = override.pop("dataset", None)
    cfg = merged(SMALL_CONFIG, **override)
    if dataset is not None:
        cfg["dataset"] = dataset
    return cfg


def test_config_defaults_and_fingerprint(small_cfg):
    assert small_cfg.engine.parallelism == 2
    assert small_cfg.eval_batch_size == 500 and small_cfg.augment is False
    other = config_from_dict(merged(SMALL_CONFIG, output_dir="elsewhere"))
    assert other.fingerprint() == small_cfg.fingerprint()
    changed = config_from_dict(merged(SMALL_CONFIG, lr=0.1))
    assert changed.fingerprint() != small_cfg.fingerprint()


@pytest.mark.parametrize(
    "override, field",
    [
        ({"rounds": 0}, "rounds"),
        ({"lr": "fast"}, "lr"),
        ({"clients_per_round": 30}, "clients_per_round"),
        ({"model": {"kind": "resnet"}}, "model"),
        ({"engine": {"parallelism": 0}}, "engine"),
        ({"dataset": {"cifar10": "/nonexistent/cifar"}}, "dataset.cifar10"),
        ({"dataset": {}}, "dataset"),
    ],
)
def test_config_errors_name_the_field(override, field):
    with pytest.raises(ConfigError) as info:
        config_from_dict(_with(**override))
    assert field in str(info.value)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_cli_run_and_strip_timing(write_config, tmp_path, golden):
    path = write_config(SMALL_CONFIG)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", str(path), "--output", str(out), "--strip-timing"]) == 0
        outs.append(out)
    a, b = ((o / "rounds.jsonl").read_bytes() for o in outs)
    assert a == b
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert [r["model_hash"] for r in rows] == golden["small_config_hashes"]
    assert all("wall_nanos" not in r for r in rows)
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()

    timed = tmp_path / "timed"
    assert main(["run", "--config", str(path), "--output", str(timed)]) == 0
    assert "wall_nanos" in (timed / "rounds.jsonl").read_text().splitlines()[0]


def test_cli_missing_dataset_path(write_config, capsys):
    path = write_config(_with(dataset={"cifar10": "/nonexistent/cifar"}))
    assert main(["run", "--config", str(path)]) == 2
    assert "dataset.cifar10" in capsys.readouterr().err


def test_cli_bad_arguments():
    assert main(["run"]) == 2
    assert main(["sweep", "--config", "x.json", "--parallelism", "0"]) == 2


def test_cli_verify(write_config, tmp_path):
    path = write_config(merged(SMALL_CONFIG, rounds=2))
    assert main(["verify", "--config", str(path), "--repeats", "1"]) == 2
    out = tmp_path / "v"
    assert main(["verify", "--config", str(path), "--repeats", "2", "--output", str(out)]) == 0
    body = json.loads((out / "verify.json").read_text())
    assert body["agreement"] is True and body["first_divergent_round_start"] is None
    assert main(["verify", "--config", str(path), "--repeats", "2", "--expect-agreement", "no"]) == 4


def test_cli_sweep(write_config, tmp_path):
    path = write_config(merged(SMALL_CONFIG, rounds=2))
    out = tmp_path / "s"
    code = main(["sweep", "--config", str(path), "--parallelism", "1,2",
                 "--transports", "shared_memory,serialized_channel", "--output", str(out)])
    assert code == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["P"], r["transport"]) for r in rows] == [
        ("1", "shared_memory"), ("2", "shared_memory"), ("1", "serialized_channel"), ("2", "serialized_channel"),
    ]
    assert {r["hash_round_2"] for r in rows} == {rows[0]["hash_round_2"]}
    assert all(r["hash_agreement"] == "Yes" and float(r["delta_final_accuracy_pp"]) == 0 for r in rows)


def test_cli_diverge(write_config, tmp_path):
    path = write_config(merged(SMALL_CONFIG, rounds=2))
    out = tmp_path / "d"
    assert main(["diverge", "--config", str(path), "--runs", "2", "--output", str(out)]) == 0
    with open(out / "divergence.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(float(r["l2_distance"]) == 0.0 for r in rows)
    assert main(["diverge", "--config", str(path), "--runs", "2", "--probe-sample", "100"]) == 3


def test_cli_make_partition(tmp_path, capsys):
    args = ["make-partition", "--clients", "10", "--samples-per-client", "100", "--per-class", "100"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(a)]) == 0
    assert "clients by number of distinct classes: 2: 10" in capsys.readouterr().out
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_partition(a).n_clients == 10
    assert main(["make-partition", "--out", str(a), "--clients", "1000"]) == 2


def test_partition_file_config(write_config, tmp_path, golden):
    part = tmp_path / "p.json"
    assert main(["make-partition", "--out", str(part), "--clients", "20", "--samples-per-client", "100",
                 "--per-class", "200", "--seed", "42"]) == 0
    cfg = dict(SMALL_CONFIG, partition={"file": str(part)})
    out = tmp_path / "o"
    assert main(["run", "--config", str(write_config(cfg)), "--output", str(out), "--strip-timing"]) == 0
    hashes = [json.loads(l)["model_hash"] for l in (out / "rounds.jsonl").read_text().splitlines()]
    assert hashes == golden["small_config_hashes"]


def test_verify_report_conventions():
    report = harness.VerifyReport(3, [("a", "b"), ("a", "c"), ("a", "b")], [0.5, 0.5, 0.6], False)
    assert report.round_agreement == [True, False]
    assert report.first_divergent_round == 3
    assert report.passed
    assert report.accuracy_std_pp == pytest.approx(100 * 0.0577350269, rel=1e-6)
