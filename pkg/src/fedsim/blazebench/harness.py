"""Repeated-run verification, parallelism sweeps and divergence probes.

Repeated runs always execute one after another, never concurrently.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsim.blazebench.config import ExperimentConfig, Workload, prepare_workload
from fedsim.engine import Collection, Transport
from fedsim.fedserver import RoundLog, run_simulation
from fedsim.tensornet.model import forward
from fedsim.tensornet.params import ModelParams


def _hashes(logs: Sequence[RoundLog]) -> tuple[str, ...]:
    return tuple(log.model_hash for log in logs)


@dataclass
class VerifyReport:
    repeats: int
    hashes: list[tuple[str, ...]]
    final_accuracies: list[float]
    expect_agreement: bool

    @property
    def round_agreement(self) -> list[bool]:
        return [len({run[r] for run in self.hashes}) == 1 for r in range(len(self.hashes[0]))]

    @property
    def agreement(self) -> bool:
        return all(self.round_agreement)

    @property
    def first_divergent_round(self) -> int | None:
        """First round whose *starting* global model differs between runs.

        Round ``r`` starts from the model aggregated at the end of round
        ``r - 1``, so a mismatch in the round-``r`` hash shows up here as
        ``r + 1``.  Round 1 starts from the shared initial model.
        """
        for r, same in enumerate(self.round_agreement, start=1):
            if not same:
                return r + 1
        return None

    @property
    def accuracy_std_pp(self) -> float:
        return 100.0 * statistics.stdev(self.final_accuracies)

    @property
    def passed(self) -> bool:
        return self.agreement == self.expect_agreement

    def to_dict(self) -> dict:
        return {
            "repeats": self.repeats,
            "round_agreement": self.round_agreement,
            "agreement": self.agreement,
            "first_divergent_round_start": self.first_divergent_round,
            "final_accuracies": self.final_accuracies,
            "final_accuracy_std_pp": self.accuracy_std_pp,
            "expect_agreement": self.expect_agreement,
            "passed": self.passed,
            "hashes": [list(h) for h in self.hashes],
        }

    def summary_lines(self) -> list[str]:
        lines = [
            f"round {r}: hash agreement {'Yes' if ok else 'No'}"
            for r, ok in enumerate(self.round_agreement, start=1)
        ]
        lines.append(f"round-wise hash agreement: {'Yes' if self.agreement else 'No'}")
        if self.first_divergent_round is not None:
            lines.append(f"first divergent round (round-start model): {self.first_divergent_round}")
        lines.append(f"final accuracy std dev [pp]: {self.accuracy_std_pp:.2f}")
        expected = "Yes" if self.expect_agreement else "No"
        lines.append(f"expected agreement {expected}: {'PASS' if self.passed else 'FAIL'}")
        return lines


def default_expectation(cfg: ExperimentConfig) -> bool:
    return cfg.engine.collection is Collection.SAMPLED_ORDER


def verify(
    cfg: ExperimentConfig,
    repeats: int,
    expect_agreement: bool | None = None,
    workload: Workload | None = None,
) -> VerifyReport:
    if repeats < 2:
        raise ValueError(f"repeats must be >= 2, got {repeats}")
    workload = workload or prepare_workload(cfg)
    hashes, accs = [], []
    for _ in range(repeats):
        logs = run_simulation(cfg, workload)
        hashes.append(_hashes(logs))
        accs.append(logs[-1].test_accuracy)
    if expect_agreement is None:
        expect_agreement = default_expectation(cfg)
    return VerifyReport(repeats, hashes, accs, expect_agreement)


@dataclass
class SweepRow:
    parallelism: int
    transport: Transport
    wall_nanos: int
    hashes: tuple[str, ...]
    final_accuracy: float
    wall_samples: list[int] = field(default_factory=list)


def sweep(
    cfg: ExperimentConfig,
    parallelisms: Sequence[int],
    transports: Sequence[Transport | str] | None = None,
    repeats: int = 1,
    workload: Workload | None = None,
) -> list[SweepRow]:
    """One row per (transport, P); ``wall_nanos`` is the median over ``repeats``.

    Wall time covers the round loop only (sum of per-round times).
    """
    if not parallelisms or any(p < 1 for p in parallelisms):
        raise ValueError("parallelism list must be non-empty with every P >= 1")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    workload = workload or prepare_workload(cfg)
    kinds = [Transport(t) for t in (transports or [cfg.engine.transport])]
    rows = []
    for transport in kinds:
        for p in parallelisms:
            run_cfg = cfg.with_engine(parallelism=p, transport=transport)
            walls = []
            for _ in range(repeats):
                logs = run_simulation(run_cfg, workload)
                walls.append(sum(log.wall_nanos for log in logs))
            rows.append(
                SweepRow(p, transport, int(statistics.median(walls)), _hashes(logs), logs[-1].test_accuracy, walls)
            )
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    n_rounds = len(rows[0].hashes)
    reference = {}
    for row in rows:
        reference.setdefault(row.transport, row)
    header = ["P", "transport", "wall_nanos"]
    header += [f"hash_round_{r}" for r in range(1, n_rounds + 1)]
    header += ["final_accuracy", "delta_final_accuracy_pp", "hash_agreement"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            ref = reference[row.transport]
            writer.writerow(
                [row.parallelism, row.transport.value, row.wall_nanos, *row.hashes]
                + [
                    repr(row.final_accuracy),
                    repr(100.0 * (row.final_accuracy - ref.final_accuracy)),
                    "Yes" if row.hashes == ref.hashes else "No",
                ]
            )


@dataclass
class DivergenceReport:
    probe_client: int
    probe_sample_index: int
    distances: list[list[float]]  # [round][run]
    hashes: list[tuple[str, ...]]

    def rows(self) -> list[tuple[int, int, float]]:
        return [
            (r, run, d)
            for r, per_run in enumerate(self.distances, start=1)
            for run, d in enumerate(per_run)
        ]

    def max_per_round(self) -> list[float]:
        return [max(per_run) for per_run in self.distances]


def _logit_distances(logits: np.ndarray) -> list[float]:
    # mean = x0 + mean(x - x0) is exactly x0 when every run agrees, so
    # identical runs report 0.0 rather than a rounding residue.
    x = logits.astype(np.float64)
    mean = x[0] + (x - x[0]).mean(axis=0)
    return [float(d) for d in np.linalg.norm(x - mean, axis=1)]


def diverge(
    cfg: ExperimentConfig,
    runs: int,
    probe_client: int,
    probe_sample: int,
    workload: Workload | None = None,
) -> DivergenceReport:
    """Track one client sample's logits at the start of every round across runs."""
    if runs < 2:
        raise ValueError(f"runs must be >= 2, got {runs}")
    workload = workload or prepare_workload(cfg)
    if not 0 <= probe_client < workload.partition.n_clients:
        raise ValueError(f"probe client {probe_client} outside [0, {workload.partition.n_clients})")
    indices = workload.partition.client_indices(probe_client)
    if not 0 <= probe_sample < len(indices):
        raise ValueError(f"probe sample {probe_sample} outside [0, {len(indices)}) for client {probe_client}")
    x = workload.train.images[indices[probe_sample] : indices[probe_sample] + 1]

    per_run_logits: list[list[np.ndarray]] = []
    hashes = []
    for _ in range(runs):
        seen: list[np.ndarray] = []

        def probe(_round: int, params: ModelParams) -> None:
            logits, _ = forward(cfg.model, params, x)
            seen.append(logits[0].copy())

        logs = run_simulation(cfg, workload, on_round_start=probe)
        per_run_logits.append(seen)
        hashes.append(_hashes(logs))
    distances = [
        _logit_distances(np.stack([run[r] for run in per_run_logits])) for r in range(cfg.rounds)
    ]
    return DivergenceReport(probe_client, probe_sample, distances, hashes)


def write_divergence_csv(report: DivergenceReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "run", "l2_distance"])
        for r, run, d in report.rows():
            writer.writerow([r, run, repr(d)])
