"""Datasets, label-skew partitioning, partition files and augmentation."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsim.rngkit import RngStream, SeedDomain, derive_seed, make_stream

CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_RECORD = 1 + 3 * 32 * 32
PARTITION_VERSION = 1
AUG_PAD = 4
AUG_FLIP_P = 0.5
SYNTHETIC_NOISE = 0.25


class FormatError(ValueError):
    """A file does not follow its expected on-disk format."""


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class MalformedError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    n_classes: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length must equal the number of images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def class_histogram(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()


def generate_synthetic(
    n_classes: int, per_class: int, shape: Sequence[int], seed: int
) -> Dataset:
    """Class-conditional Gaussian blobs, class-major order.

    Class ``k`` draws a uniform mean image and then its samples' noise from
    one stream seeded by ``derive_seed(seed, SERVER_INIT, k, 0)``.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    shape = tuple(int(d) for d in shape)
    dim = math.prod(shape)
    images = np.empty((n_classes * per_class, dim), dtype=np.float32)
    for k in range(n_classes):
        stream = make_stream(derive_seed(seed, SeedDomain.SERVER_INIT, k, 0))
        mean = stream.uniforms(dim)
        noise = stream.gaussians(per_class * dim).reshape(per_class, dim)
        block = np.clip(mean + SYNTHETIC_NOISE * noise, 0.0, 1.0)
        images[k * per_class : (k + 1) * per_class] = block
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    return Dataset(images.reshape((-1, *shape)), labels, n_classes)


def split_holdout(dataset: Dataset, per_class: int) -> tuple[Dataset, Dataset]:
    """Move the last ``per_class`` samples of every class into a test set."""
    test_mask = np.zeros(len(dataset), dtype=bool)
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if per_class > idx.size:
            raise ValueError(f"class {k} has {idx.size} samples, cannot hold out {per_class}")
        test_mask[idx[idx.size - per_class :]] = True
    train = np.flatnonzero(~test_mask)
    test = np.flatnonzero(test_mask)
    return dataset.subset(train), dataset.subset(test)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR10_RECORD:
        offset = len(raw) - len(raw) % CIFAR10_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR10_RECORD}"
        )
    pixels = records[:, 1:].reshape(-1, *CIFAR10_SHAPE).astype(np.float32) / np.float32(255.0)
    return pixels, labels


def load_cifar10_binary(directory: str | Path, split: str = "train") -> Dataset:
    """Read CIFAR-10 ``.bin`` batches (1 label byte + 3072 channel-major pixels).

    ``split="train"`` reads ``data_batch_*.bin``, ``split="test"`` reads
    ``test_batch.bin``; a directory with neither reads every ``*.bin`` in
    name order.  Record order is preserved.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    files = sorted(directory.glob(pattern)) or sorted(directory.glob("*.bin"))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 .bin files in {directory}")
    parts = [_read_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10)


@dataclass(frozen=True)
class Partition:
    base_seed: int
    n_clients: int
    classes_per_client: int
    assignment: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.assignment) != self.n_clients:
            raise ValueError("assignment must hold one index list per client")

    def client_indices(self, client_id: int) -> np.ndarray:
        return np.asarray(self.assignment[client_id], dtype=np.int64)

    def to_payload(self) -> dict:
        return {
            "version": PARTITION_VERSION,
            "base_seed": self.base_seed,
            "n_clients": self.n_clients,
            "classes_per_client": self.classes_per_client,
            "assignment": [list(a) for a in self.assignment],
        }


def partition_label_skew(
    dataset: Dataset,
    n_clients: int,
    classes_per_client: int,
    samples_per_client: int,
    seed: int,
) -> Partition:
    """Shard-based label-skew partition with exactly ``classes_per_client`` labels each.

    Each class's samples (ascending index) are cut into shards of
    ``samples_per_client // classes_per_client``; a shard never spans two
    classes.  Shard ids are shuffled with a ``CLIENT_SAMPLING`` stream.  Classes
    are then laid out in order of first appearance in the shuffled list, each
    contributing at most ``n_clients`` of its shards in shuffled order, and the
    resulting sequence is dealt column-major onto an ``n_clients x
    classes_per_client`` grid.  A class's entries are contiguous and at most
    ``n_clients`` long, so they land on distinct clients.
    """
    n = len(dataset)
    if n_clients < 1 or classes_per_client < 1 or samples_per_client < 1:
        raise ValueError("n_clients, classes_per_client and samples_per_client must be >= 1")
    if classes_per_client > dataset.n_classes:
        raise ValueError(
            f"classes_per_client={classes_per_client} exceeds n_classes={dataset.n_classes}"
        )
    if samples_per_client % classes_per_client:
        raise ValueError(
            f"samples_per_client={samples_per_client} must be a multiple of "
            f"classes_per_client={classes_per_client}"
        )
    if n_clients * samples_per_client > n:
        raise ValueError(
            f"n_clients * samples_per_client = {n_clients * samples_per_client} exceeds N={n}"
        )
    shard_size = samples_per_client // classes_per_client

    shards: list[np.ndarray] = []
    shard_class: list[int] = []
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        for s in range(idx.size // shard_size):
            shards.append(idx[s * shard_size : (s + 1) * shard_size])
            shard_class.append(k)
    per_class_shards = np.bincount(np.asarray(shard_class, dtype=np.int64), minlength=dataset.n_classes)
    supply = int(np.minimum(per_class_shards, n_clients).sum())
    needed = n_clients * classes_per_client
    if supply < needed:
        raise ValueError(
            f"per-class supply too small: sum over classes of min(shards_k, n_clients) = {supply} "
            f"< n_clients * classes_per_client = {needed} (shard size {shard_size})"
        )

    stream = make_stream(derive_seed(seed, SeedDomain.CLIENT_SAMPLING, 0, 0))
    order = stream.permutation(len(shards))
    by_class: dict[int, list[int]] = {}
    for sid in order:
        by_class.setdefault(shard_class[sid], []).append(int(sid))
    sequence: list[int] = []
    for shard_ids in by_class.values():  # insertion order = first appearance
        sequence.extend(shard_ids[:n_clients])
    sequence = sequence[:needed]

    owned: list[list[int]] = [[] for _ in range(n_clients)]
    for t, sid in enumerate(sequence):
        owned[t % n_clients].extend(shards[sid].tolist())
    assignment = tuple(tuple(sorted(ids)) for ids in owned)
    return Partition(seed, n_clients, classes_per_client, assignment)


def _canonical_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def partition_bytes(partition: Partition) -> bytes:
    payload = partition.to_payload()
    payload["crc32"] = zlib.crc32(_canonical_json(payload))
    return _canonical_json(payload)


def partition_crc32(partition: Partition) -> int:
    return zlib.crc32(_canonical_json(partition.to_payload()))


def save_partition(partition: Partition, path: str | Path) -> None:
    Path(path).write_bytes(partition_bytes(partition))


def load_partition(path: str | Path) -> Partition:
    path = Path(path)
    try:
        obj = json.loads(path.read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedError(f"{path}: not a JSON document ({exc})") from None
    if not isinstance(obj, dict):
        raise MalformedError(f"{path}: top level must be a JSON object")
    expected = {"version", "base_seed", "n_clients", "classes_per_client", "assignment", "crc32"}
    if set(obj) != expected:
        raise MalformedError(f"{path}: keys {sorted(obj)} != {sorted(expected)}")
    if obj["version"] != PARTITION_VERSION:
        raise VersionError(f"{path}: version {obj['version']!r}, expected {PARTITION_VERSION}")
    crc = obj.pop("crc32")
    if zlib.crc32(_canonical_json(obj)) != crc:
        raise ChecksumError(f"{path}: crc32 mismatch")
    assignment = obj["assignment"]
    ints = (obj["base_seed"], obj["n_clients"], obj["classes_per_client"])
    if not all(isinstance(v, int) for v in ints) or not isinstance(assignment, list):
        raise MalformedError(f"{path}: wrong field types")
    if not all(isinstance(a, list) and all(isinstance(i, int) for i in a) for a in assignment):
        raise MalformedError(f"{path}: assignment must be a list of integer lists")
    try:
        return Partition(
            obj["base_seed"],
            obj["n_clients"],
            obj["classes_per_client"],
            tuple(tuple(a) for a in assignment),
        )
    except ValueError as exc:
        raise MalformedError(f"{path}: {exc}") from None


def augment(batch: np.ndarray, stream: RngStream) -> np.ndarray:
    """Random horizontal flip then reflect-padded random crop, per sample.

    Each sample consumes exactly three draws: one uniform for the flip and
    two bounded draws in ``[0, 9)`` for the crop origin inside the padded
    image.  Origin ``(4, 4)`` is the unshifted crop.
    """
    if batch.ndim != 4:
        raise ValueError(f"batch must be [B, C, H, W], got shape {batch.shape}")
    b, _, h, w = batch.shape
    if h <= AUG_PAD or w <= AUG_PAD:
        raise ValueError(f"augment needs H, W >= {AUG_PAD + 1}, got {h}x{w}")
    draws = stream.u64_array(3 * b).reshape(b, 3)
    flips = ((draws[:, 0] >> np.uint64(11)).astype(np.float64) * 2.0**-53) < AUG_FLIP_P
    span = np.uint64(2 * AUG_PAD + 1)
    offsets = (((draws[:, 1:] >> np.uint64(32)) * span) >> np.uint64(32)).astype(np.int64)
    flipped = np.where(flips[:, None, None, None], batch[:, :, :, ::-1], batch)
    pad = ((0, 0), (0, 0), (AUG_PAD, AUG_PAD), (AUG_PAD, AUG_PAD))
    padded = np.pad(flipped, pad, mode="reflect")
    out = np.empty_like(batch)
    for i in range(b):
        oy, ox = offsets[i]
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    return out
