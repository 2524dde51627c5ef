"""Experiment configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from fedsim.datahub import (
    Dataset,
    Partition,
    generate_synthetic,
    load_cifar10_binary,
    load_partition,
    partition_label_skew,
    split_holdout,
)
from fedsim.engine import EngineConfig
from fedsim.tensornet.params import ModelSpec


class ConfigError(ValueError):
    """A config field is missing or invalid; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SyntheticData:
    n_classes: int = 10
    per_class: int = 5000
    test_per_class: int = 100
    shape: tuple[int, int, int] = (1, 8, 8)
    seed: int = 7


@dataclass(frozen=True)
class DataSource:
    synthetic: SyntheticData | None = None
    cifar10: str | None = None


@dataclass(frozen=True)
class PartitionSource:
    classes_per_client: int = 2
    samples_per_client: int = 500
    file: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    base_seed: int
    model: ModelSpec
    dataset: DataSource
    partition: PartitionSource
    rounds: int
    clients_total: int
    clients_per_round: int
    epochs: int
    batch_size: int
    lr: float
    engine: EngineConfig = field(default_factory=EngineConfig)
    output_dir: str = "out"
    augment: bool = False
    eval_batch_size: int = 500

    def to_dict(self) -> dict[str, Any]:
        if self.dataset.synthetic is not None:
            s = self.dataset.synthetic
            dataset: dict[str, Any] = {
                "synthetic": {
                    "n_classes": s.n_classes,
                    "per_class": s.per_class,
                    "test_per_class": s.test_per_class,
                    "shape": list(s.shape),
                    "seed": s.seed,
                }
            }
        else:
            dataset = {"cifar10": self.dataset.cifar10}
        if self.partition.file is not None:
            partition: dict[str, Any] = {"file": self.partition.file}
        else:
            partition = {
                "classes_per_client": self.partition.classes_per_client,
                "samples_per_client": self.partition.samples_per_client,
            }
        return {
            "base_seed": self.base_seed,
            "model": self.model.to_dict(),
            "dataset": dataset,
            "partition": partition,
            "rounds": self.rounds,
            "clients_total": self.clients_total,
            "clients_per_round": self.clients_per_round,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "engine": self.engine.to_dict(),
            "output_dir": self.output_dir,
            "augment": self.augment,
            "eval_batch_size": self.eval_batch_size,
        }

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where outputs are written."""
        body = self.to_dict()
        del body["output_dir"]
        return hashlib.sha256(canonical_json(body)).hexdigest()

    def with_engine(self, **changes: Any) -> ExperimentConfig:
        engine = EngineConfig(**{**self.engine.to_dict(), **changes})
        return replace(self, engine=engine)


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _take(obj: dict, key: str, path: str, kind: type | tuple[type, ...], default: Any = ...) -> Any:
    name = f"{path}.{key}" if path else key
    if key not in obj:
        if default is ...:
            raise ConfigError(name, "missing required field")
        return default
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and kind is not bool:
        raise ConfigError(name, f"expected {getattr(kind, '__name__', kind)}, got bool")
    if not isinstance(value, kind):
        raise ConfigError(name, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _positive(value: int | float, name: str, allow_zero: bool = False) -> None:
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(name, f"must be {'>= 0' if allow_zero else '> 0'}, got {value}")


def config_from_dict(obj: dict[str, Any], *, check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")

    m = _take(obj, "model", "", dict)
    try:
        model = ModelSpec(
            kind=_take(m, "kind", "model", str),
            input_shape=tuple(_take(m, "input_shape", "model", list)),
            n_classes=_take(m, "n_classes", "model", int),
            dropout_rate=_take(m, "dropout_rate", "model", float, 0.0),
            payload_width=_take(m, "payload_width", "model", int, 1),
            hidden=_take(m, "hidden", "model", int, 128),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("model", str(exc)) from None

    d = _take(obj, "dataset", "", dict)
    if ("synthetic" in d) == ("cifar10" in d):
        raise ConfigError("dataset", "exactly one of 'synthetic' or 'cifar10' is required")
    if "synthetic" in d:
        s = _take(d, "synthetic", "dataset", dict)
        synthetic = SyntheticData(
            n_classes=_take(s, "n_classes", "dataset.synthetic", int, 10),
            per_class=_take(s, "per_class", "dataset.synthetic", int, 5000),
            test_per_class=_take(s, "test_per_class", "dataset.synthetic", int, 100),
            shape=tuple(_take(s, "shape", "dataset.synthetic", list, [1, 8, 8])),
            seed=_take(s, "seed", "dataset.synthetic", int, 7),
        )
        if synthetic.n_classes < 2:
            raise ConfigError("dataset.synthetic.n_classes", f"must be >= 2, got {synthetic.n_classes}")
        _positive(synthetic.per_class, "dataset.synthetic.per_class")
        _positive(synthetic.test_per_class, "dataset.synthetic.test_per_class")
        if tuple(synthetic.shape) != model.input_shape:
            raise ConfigError("dataset.synthetic.shape", "must equal model.input_shape")
        if synthetic.n_classes != model.n_classes:
            raise ConfigError("dataset.synthetic.n_classes", "must equal model.n_classes")
        dataset = DataSource(synthetic=synthetic)
    else:
        path = _take(d, "cifar10", "dataset", str)
        if check_paths and not Path(path).is_dir():
            raise ConfigError("dataset.cifar10", f"directory does not exist: {path}")
        dataset = DataSource(cifar10=path)

    p = _take(obj, "partition", "", dict)
    if "file" in p:
        path = _take(p, "file", "partition", str)
        if check_paths and not Path(path).is_file():
            raise ConfigError("partition.file", f"file does not exist: {path}")
        partition = PartitionSource(file=path)
    else:
        partition = PartitionSource(
            classes_per_client=_take(p, "classes_per_client", "partition", int, 2),
            samples_per_client=_take(p, "samples_per_client", "partition", int, 500),
        )
        _positive(partition.classes_per_client, "partition.classes_per_client")
        _positive(partition.samples_per_client, "partition.samples_per_client")

    e = _take(obj, "engine", "", dict, {})
    try:
        engine = EngineConfig(
            parallelism=_take(e, "parallelism", "engine", int, 1),
            transport=_take(e, "transport", "engine", str, "shared_memory"),
            collection=_take(e, "collection", "engine", str, "sampled_order"),
            jitter_micros=_take(e, "jitter_micros", "engine", int, 0),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("engine", str(exc)) from None

    cfg = ExperimentConfig(
        base_seed=_take(obj, "base_seed", "", int),
        model=model,
        dataset=dataset,
        partition=partition,
        rounds=_take(obj, "rounds", "", int),
        clients_total=_take(obj, "clients_total", "", int),
        clients_per_round=_take(obj, "clients_per_round", "", int),
        epochs=_take(obj, "epochs", "", int),
        batch_size=_take(obj, "batch_size", "", int),
        lr=_take(obj, "lr", "", float),
        engine=engine,
        output_dir=_take(obj, "output_dir", "", str, "out"),
        augment=_take(obj, "augment", "", bool, False),
        eval_batch_size=_take(obj, "eval_batch_size", "", int, 500),
    )
    if not 0 <= cfg.base_seed < 2**64:
        raise ConfigError("base_seed", "must be a 64-bit unsigned integer")
    _positive(cfg.rounds, "rounds")
    _positive(cfg.clients_total, "clients_total")
    _positive(cfg.clients_per_round, "clients_per_round")
    if cfg.clients_per_round > cfg.clients_total:
        raise ConfigError("clients_per_round", "must not exceed clients_total")
    _positive(cfg.epochs, "epochs", allow_zero=True)
    _positive(cfg.batch_size, "batch_size")
    _positive(cfg.lr, "lr")
    _positive(cfg.eval_batch_size, "eval_batch_size")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    return config_from_dict(obj)


@dataclass(frozen=True, eq=False)
class Workload:
    """Data prepared once per config; excluded from round timing."""

    train: Dataset
    test: Dataset
    partition: Partition


def prepare_workload(cfg: ExperimentConfig) -> Workload:
    if cfg.dataset.synthetic is not None:
        s = cfg.dataset.synthetic
        full = generate_synthetic(s.n_classes, s.per_class + s.test_per_class, s.shape, s.seed)
        train, test = split_holdout(full, s.test_per_class)
    else:
        train = load_cifar10_binary(cfg.dataset.cifar10, "train")
        test = load_cifar10_binary(cfg.dataset.cifar10, "test")
    if train.sample_shape != cfg.model.input_shape:
        raise ConfigError("model.input_shape", f"dataset samples have shape {list(train.sample_shape)}")
    if cfg.partition.file is not None:
        partition = load_partition(cfg.partition.file)
    else:
        try:
            partition = partition_label_skew(
                train,
                cfg.clients_total,
                cfg.partition.classes_per_client,
                cfg.partition.samples_per_client,
                cfg.base_seed,
            )
        except ValueError as exc:
            raise ConfigError("partition", str(exc)) from None
    if partition.n_clients != cfg.clients_total:
        raise ConfigError("partition", f"holds {partition.n_clients} clients, config says {cfg.clients_total}")
    if any(max(a, default=-1) >= len(train) for a in partition.assignment):
        raise ConfigError("partition", "indices exceed the training set size")
    if any(len(a) == 0 for a in partition.assignment):
        raise ConfigError("partition", "every client needs at least one sample")
    return Workload(train, test, partition)
