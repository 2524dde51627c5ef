"""Command line entry point: ``fedsim {run,verify,sweep,diverge,make-partition}``.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime failure,
4 verification expectation not met.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

from fedsim.blazebench import harness
from fedsim.blazebench.config import ConfigError, ExperimentConfig, load_config, prepare_workload
from fedsim.datahub import (
    generate_synthetic,
    load_cifar10_binary,
    partition_crc32,
    partition_label_skew,
    save_partition,
)
from fedsim.engine import Transport
from fedsim.fedserver import simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_EXPECTATION = 4

log = logging.getLogger("fedsim")


class UsageError(ValueError):
    pass


def _output_dir(args: argparse.Namespace, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(args.output or (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("need at least one value, each >= 1")
    return values


def _transport_list(text: str) -> list[Transport]:
    try:
        return [Transport(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        choices = ", ".join(t.value for t in Transport)
        raise argparse.ArgumentTypeError(f"transports must be among: {choices}") from None


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    workload = prepare_workload(cfg)
    out = _output_dir(args, cfg)
    with open(out / "rounds.jsonl", "w", encoding="utf-8") as fh:

        def write(entry) -> None:
            fh.write(entry.to_json(strip_timing=args.strip_timing) + "\n")
            fh.flush()

        state = simulate(cfg, workload, on_log=write)
    history = state.history
    summary = {
        "rounds": len(history),
        "final_accuracy": history[-1].test_accuracy,
        "final_loss": history[-1].test_loss,
        "final_hash": history[-1].model_hash,
        "config_fingerprint": cfg.fingerprint(),
    }
    if not args.strip_timing:
        summary["total_wall_nanos"] = sum(h.wall_nanos for h in history)
        summary["round_wall_nanos"] = [h.wall_nanos for h in history]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"final accuracy {summary['final_accuracy']:.4f}  hash {summary['final_hash']}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.repeats < 2:
        raise UsageError(f"--repeats must be >= 2, got {args.repeats}")
    expect = None if args.expect_agreement is None else args.expect_agreement == "yes"
    report = harness.verify(cfg, args.repeats, expect)
    out = _output_dir(args, cfg)
    body = report.to_dict()
    (out / "verify.json").write_text(json.dumps(body, indent=2) + "\n")
    for line in report.summary_lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_EXPECTATION


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    rows = harness.sweep(cfg, args.parallelism, args.transports, args.repeats)
    out = _output_dir(args, cfg)
    harness.write_sweep_csv(rows, out / "sweep.csv")
    for row in rows:
        print(f"{row.transport.value:<18} P={row.parallelism:<3} wall={row.wall_nanos / 1e9:.3f}s  "
              f"final_acc={row.final_accuracy:.4f}  hash={row.hashes[-1][:16]}")
    return EXIT_OK


def cmd_diverge(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.runs < 2:
        raise UsageError(f"--runs must be >= 2, got {args.runs}")
    report = harness.diverge(cfg, args.runs, args.probe_client, args.probe_sample)
    out = _output_dir(args, cfg)
    harness.write_divergence_csv(report, out / "divergence.csv")
    for r, m in enumerate(report.max_per_round(), start=1):
        print(f"round {r}: max L2 distance {m!r}")
    return EXIT_OK


def cmd_make_partition(args: argparse.Namespace) -> int:
    if args.cifar10:
        if not Path(args.cifar10).is_dir():
            raise ConfigError("--cifar10", f"directory does not exist: {args.cifar10}")
        dataset = load_cifar10_binary(args.cifar10, "train")
    else:
        dataset = generate_synthetic(args.n_classes, args.per_class, args.shape, args.dataset_seed)
    try:
        partition = partition_label_skew(
            dataset, args.clients, args.classes_per_client, args.samples_per_client, args.seed
        )
    except ValueError as exc:
        raise ConfigError("partition", str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_partition(partition, out)
    print(f"wrote {out}  crc32={partition_crc32(partition):08x}")
    shapes = Counter()
    for cid in range(partition.n_clients):
        labels = dataset.labels[partition.client_indices(cid)]
        shapes[len(set(labels.tolist()))] += 1
        if cid < args.show_clients:
            hist = Counter(labels.tolist())
            print(f"client {cid}: " + ", ".join(f"class {k}: {hist[k]}" for k in sorted(hist)))
    print("clients by number of distinct classes: " + ", ".join(f"{k}: {v}" for k, v in sorted(shapes.items())))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--output", help="output directory (default: config output_dir)")
        p.add_argument("--strip-timing", action="store_true", help="omit wall-clock fields")

    p = sub.add_parser("run", help="run one simulation")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="repeat a run and check round-wise hash agreement")
    common(p)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--expect-agreement", choices=("yes", "no"),
                   help="default: yes for sampled_order, no for completion_order")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run once per parallelism level")
    common(p)
    p.add_argument("--parallelism", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--transports", type=_transport_list, default=None,
                   help="comma-separated transports to compare (default: the config's)")
    p.add_argument("--repeats", type=int, default=1, help="runs per row; wall time is the median")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diverge", help="track a probe sample's logits across runs")
    common(p)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--probe-client", type=int, default=0)
    p.add_argument("--probe-sample", type=int, default=0)
    p.set_defaults(func=cmd_diverge)

    p = sub.add_parser("make-partition", help="generate and save a label-skew partition")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--clients", type=int, default=100)
    p.add_argument("--classes-per-client", type=int, default=2)
    p.add_argument("--samples-per-client", type=int, default=500)
    p.add_argument("--cifar10", help="CIFAR-10 binary directory (default: synthetic data)")
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=5000)
    p.add_argument("--shape", type=lambda s: tuple(_int_list(s)), default=(1, 8, 8))
    p.add_argument("--dataset-seed", type=int, default=7)
    p.add_argument("--show-clients", type=int, default=5, help="clients to print histograms for")
    p.set_defaults(func=cmd_make_partition)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
