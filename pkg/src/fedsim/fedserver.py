"""Server side of a round: sampling, fixed-order FedAvg, evaluation, hashing."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedsim.blazebench.config import ExperimentConfig, Workload, prepare_workload
from fedsim.datahub import Dataset
from fedsim.engine import DownlinkPackage, Engine, UplinkPackage, encode_params
from fedsim.rngkit import RngStreamSuite, SeedDomain, derive_seed, make_stream, sample_without_replacement
from fedsim.tensornet import kernels as K
from fedsim.tensornet.model import forward, train_local
from fedsim.tensornet.params import Layout, ModelParams, ModelSpec, init_params


@dataclass
class RoundLog:
    round: int
    model_hash: str
    test_accuracy: float
    test_loss: float
    wall_nanos: int
    config_fingerprint: str

    def to_json(self, strip_timing: bool = False) -> str:
        row = asdict(self)
        if strip_timing:
            del row["wall_nanos"]
        return json.dumps(row, sort_keys=False, separators=(",", ":"))


@dataclass
class ServerState:
    round: int
    global_params: ModelParams
    base_seed: int
    history: list[RoundLog] = field(default_factory=list)


def sample_clients(base_seed: int, round: int, n_clients: int, count: int) -> list[int]:
    if not 0 <= count <= n_clients:
        raise ValueError(f"cannot sample {count} of {n_clients} clients")
    stream = make_stream(derive_seed(base_seed, SeedDomain.CLIENT_SAMPLING, 0, round))
    return sample_without_replacement(stream, n_clients, count)


def fedavg_weights(counts: Sequence[int]) -> np.ndarray:
    """``count_i / sum(counts)`` in float64, then rounded once to float32."""
    total = float(sum(counts))
    return np.array([c / total for c in counts], dtype=np.float64).astype(np.float32)


def fedavg(uplinks: Sequence[UplinkPackage], layout: Layout) -> ModelParams:
    """Sample-weighted mean, accumulated in float32 strictly in list order.

    The order of ``uplinks`` is part of the result: float addition does not
    associate, so a permuted list can produce different bits.
    """
    if not uplinks:
        raise ValueError("fedavg needs at least one uplink")
    layout = tuple((n, tuple(s)) for n, s in layout)
    for up in uplinks:
        if up.updated_params.layout != layout:
            raise ValueError(f"uplink from client {up.client_id} has a mismatched layout")
        if up.updated_params.values.dtype != np.float32:
            raise ValueError(f"uplink from client {up.client_id} is not float32")
    weights = fedavg_weights([up.sample_count for up in uplinks])
    acc = np.zeros(len(uplinks[0].updated_params), dtype=np.float32)
    for w, up in zip(weights, uplinks):
        acc += w * up.updated_params.values
    return ModelParams(layout, acc)


def model_hash(params: ModelParams) -> str:
    return hashlib.sha256(encode_params(params)).hexdigest()


def evaluate(
    spec: ModelSpec, params: ModelParams, test_set: Dataset, batch_size: int = 500
) -> tuple[float, float]:
    """``(accuracy, mean loss)`` in dataset order, inference mode.

    Argmax ties resolve to the lowest class index.
    """
    n = len(test_set)
    if n == 0:
        raise ValueError("test set is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        x = test_set.images[start : start + batch_size]
        y = test_set.labels[start : start + batch_size]
        logits, _ = forward(spec, params, x)
        losses, _ = K.softmax_xent(logits, y)
        correct += int((K.argmax_rows(logits) == y).sum())
        loss_sum += K.ordered_sum(losses)
    return correct / n, loss_sum / n


def make_client_fn(cfg: ExperimentConfig, workload: Workload):
    def client_fn(downlink: DownlinkPackage, client_id: int, suite: RngStreamSuite):
        data = workload.train.subset(workload.partition.client_indices(client_id))
        return train_local(
            cfg.model,
            downlink.global_params,
            data,
            cfg.epochs,
            cfg.batch_size,
            cfg.lr,
            suite,
            use_augment=cfg.augment,
        )

    return client_fn


def initial_params(cfg: ExperimentConfig) -> ModelParams:
    return init_params(cfg.model, make_stream(derive_seed(cfg.base_seed, SeedDomain.SERVER_INIT, 0, 0)))


RoundStartHook = Callable[[int, ModelParams], None]
UplinkHook = Callable[[int, list[UplinkPackage]], None]


def simulate(
    cfg: ExperimentConfig,
    workload: Workload | None = None,
    *,
    on_round_start: RoundStartHook | None = None,
    on_uplinks: UplinkHook | None = None,
    on_log: Callable[[RoundLog], None] | None = None,
) -> ServerState:
    """Run ``cfg.rounds`` rounds and return the final server state.

    Rounds are numbered from 1 in logs and hooks; seeds use the 0-based
    round index.  Only the round loop is timed.
    """
    workload = workload or prepare_workload(cfg)
    state = ServerState(0, initial_params(cfg), cfg.base_seed)
    fingerprint = cfg.fingerprint()
    client_fn = make_client_fn(cfg, workload)
    layout = state.global_params.layout
    with Engine(cfg.engine) as engine:
        for r in range(cfg.rounds):
            if on_round_start is not None:
                on_round_start(r + 1, state.global_params)
            t0 = time.perf_counter_ns()
            sampled = sample_clients(cfg.base_seed, r, cfg.clients_total, cfg.clients_per_round)
            downlink = DownlinkPackage(r, state.global_params, cfg.base_seed)
            uplinks = engine.run_round(downlink, sampled, client_fn)
            # Completion-order mode hands back a different order; aggregation follows it.
            state.global_params = fedavg(uplinks, layout)
            accuracy, loss = evaluate(cfg.model, state.global_params, workload.test, cfg.eval_batch_size)
            wall = time.perf_counter_ns() - t0
            state.round += 1
            log = RoundLog(r + 1, model_hash(state.global_params), accuracy, loss, wall, fingerprint)
            state.history.append(log)
            if on_uplinks is not None:
                on_uplinks(r + 1, uplinks)
            if on_log is not None:
                on_log(log)
    return state


def run_simulation(cfg: ExperimentConfig, workload: Workload | None = None, **hooks) -> list[RoundLog]:
    return simulate(cfg, workload, **hooks).history
