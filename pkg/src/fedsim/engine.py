"""Parallel round execution over a reusable thread pool.

Two knobs change *how* a round runs without changing what each client
computes:

* transport: clients either read the global parameters through a shared
  read-only view, or receive them as canonical bytes pushed through an
  in-process channel (the cost a process pool would pay for pickling);
* collection: uplinks are returned in sampled order (deterministic) or in
  the order jobs finish (deliberately not).
"""

from __future__ import annotations

import enum
import queue
import random
import struct
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fedsim.rngkit import RngStreamSuite, make_suite
from fedsim.tensornet.params import Layout, ModelParams

MAGIC = b"BFL1"
_U32 = struct.Struct("<I")


class Transport(str, enum.Enum):
    SHARED_MEMORY = "shared_memory"
    SERIALIZED_CHANNEL = "serialized_channel"


class Collection(str, enum.Enum):
    SAMPLED_ORDER = "sampled_order"
    COMPLETION_ORDER = "completion_order"


class CodecError(ValueError):
    """Bytes do not decode to parameters of the expected layout."""


class ClientJobError(RuntimeError):
    def __init__(self, client_id: int, cause: BaseException):
        super().__init__(f"client {client_id} failed: {cause!r}")
        self.client_id = client_id


@dataclass(frozen=True)
class EngineConfig:
    parallelism: int = 1
    transport: Transport = Transport.SHARED_MEMORY
    collection: Collection = Collection.SAMPLED_ORDER
    jitter_micros: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "transport", Transport(self.transport))
        object.__setattr__(self, "collection", Collection(self.collection))
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.jitter_micros < 0:
            raise ValueError(f"jitter_micros must be >= 0, got {self.jitter_micros}")

    def to_dict(self) -> dict:
        return {
            "parallelism": self.parallelism,
            "transport": self.transport.value,
            "collection": self.collection.value,
            "jitter_micros": self.jitter_micros,
        }


@dataclass(frozen=True)
class DownlinkPackage:
    round: int
    global_params: ModelParams
    base_seed: int = 0


@dataclass
class UplinkPackage:
    client_id: int
    updated_params: ModelParams
    sample_count: int
    train_loss: float
    compute_nanos: int = 0


# client_fn(downlink, client_id, suite) -> (params, sample_count, train_loss)
ClientFn = Callable[[DownlinkPackage, int, RngStreamSuite], "tuple[ModelParams, int, float]"]


def encode_params(params: ModelParams) -> bytes:
    """Canonical bytes: ``BFL1``, u32 tensor count, then per tensor u32 rank,
    u32 dims and little-endian float32 elements (all little-endian)."""
    values = np.asarray(params.values, dtype="<f4")
    parts = [MAGIC, _U32.pack(len(params.layout))]
    pos = 0
    for _, shape in params.layout:
        parts.append(struct.pack(f"<{len(shape) + 1}I", len(shape), *shape))
        size = int(np.prod(shape, dtype=np.int64))
        parts.append(values[pos : pos + size].tobytes())
        pos += size
    return b"".join(parts)


def encoded_size(layout: Layout) -> int:
    return 8 + sum(4 + 4 * len(s) + 4 * int(np.prod(s, dtype=np.int64)) for _, s in layout)


def decode_params(data: bytes, layout: Layout) -> ModelParams:
    """Inverse of :func:`encode_params`; the header must match ``layout``."""
    view = memoryview(data)
    if len(view) != encoded_size(layout):
        raise CodecError(f"expected {encoded_size(layout)} bytes for layout, got {len(view)}")
    if bytes(view[:4]) != MAGIC:
        raise CodecError(f"bad magic {bytes(view[:4])!r}")
    (count,) = _U32.unpack_from(view, 4)
    if count != len(layout):
        raise CodecError(f"tensor count {count} != layout length {len(layout)}")
    total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout)
    out = np.empty(total, dtype=np.float32)
    pos = 8
    filled = 0
    for name, shape in layout:
        (rank,) = _U32.unpack_from(view, pos)
        dims = struct.unpack_from(f"<{rank}I", view, pos + 4)
        if tuple(dims) != tuple(shape):
            raise CodecError(f"tensor {name}: shape {list(dims)} != layout {list(shape)}")
        pos += 4 + 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[filled : filled + size] = np.frombuffer(view, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        filled += size
    return ModelParams(layout, out)


class _ByteChannel:
    """A one-slot in-process byte pipe."""

    def __init__(self) -> None:
        self._q: queue.SimpleQueue[bytes] = queue.SimpleQueue()

    def send(self, payload: bytes) -> None:
        self._q.put(payload)

    def recv(self) -> bytes:
        return self._q.get()


def _busy_wait(micros: int) -> None:
    deadline = time.perf_counter_ns() + micros * 1000
    while time.perf_counter_ns() < deadline:
        pass


@dataclass
class RoundTiming:
    wall_nanos: int
    breakdown: dict[str, int] = field(default_factory=dict)


class Engine:
    """A worker pool reused across rounds of one experiment."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self._pool: ThreadPoolExecutor | None = None
        self._jitter = random.Random()  # intentionally unseeded
        self._jitter_lock = threading.Lock()

    def __enter__(self) -> Engine:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            # Threads start lazily, so a round with n jobs uses at most min(P, n).
            self._pool = ThreadPoolExecutor(
                max_workers=self.config.parallelism, thread_name_prefix="fedsim-worker"
            )
        return self._pool

    def _jitter_micros(self) -> int:
        if not self.config.jitter_micros or self.config.collection is not Collection.COMPLETION_ORDER:
            return 0
        with self._jitter_lock:
            return self._jitter.randint(0, self.config.jitter_micros)

    def run_round(
        self,
        downlink: DownlinkPackage,
        sampled_clients: Sequence[int],
        client_fn: ClientFn,
    ) -> list[UplinkPackage]:
        return self.timed_round(downlink, sampled_clients, client_fn)[0]

    def timed_round(
        self,
        downlink: DownlinkPackage,
        sampled_clients: Sequence[int],
        client_fn: ClientFn,
    ) -> tuple[list[UplinkPackage], RoundTiming]:
        t0 = time.perf_counter_ns()
        clients = [int(c) for c in sampled_clients]
        if not clients:
            return [], RoundTiming(time.perf_counter_ns() - t0, {"dispatch": 0, "compute": 0, "collect": 0})

        serialized = self.config.transport is Transport.SERIALIZED_CHANNEL
        completion = self.config.collection is Collection.COMPLETION_ORDER
        layout = downlink.global_params.layout
        shared_view = downlink.global_params.readonly()
        finished: list[int] = []
        finished_lock = threading.Lock()

        def job(slot: int, client_id: int, suite: RngStreamSuite, down_ch, up_ch, jitter: int):
            if jitter:
                _busy_wait(jitter)
            if serialized:
                params_in = decode_params(down_ch.recv(), layout)
            else:
                params_in = shared_view
            local = replace(downlink, global_params=params_in)
            start = time.perf_counter_ns()
            params, count, loss = client_fn(local, client_id, suite)
            compute = time.perf_counter_ns() - start
            if params.layout != layout:
                raise ValueError(f"client {client_id} returned a different parameter layout")
            if count <= 0:
                raise ValueError(f"client {client_id} reported sample_count={count}")
            if serialized:
                up_ch.send(encode_params(params))
                params = None
            with finished_lock:
                finished.append(slot)
            return UplinkPackage(client_id, params, count, float(loss), compute)

        pool = self._executor()
        futures: list[Future] = []
        up_channels: list[_ByteChannel | None] = []
        for slot, client_id in enumerate(clients):
            suite = make_suite(downlink.base_seed, client_id, downlink.round)
            down_ch = up_ch = None
            if serialized:
                down_ch, up_ch = _ByteChannel(), _ByteChannel()
                down_ch.send(encode_params(downlink.global_params))
            up_channels.append(up_ch)
            futures.append(pool.submit(job, slot, client_id, suite, down_ch, up_ch, self._jitter_micros()))
        t1 = time.perf_counter_ns()

        _, pending = wait(futures, return_when=FIRST_EXCEPTION)
        if pending:
            # Fail fast: drop queued jobs, let running ones finish, report the first failure.
            for fut in pending:
                fut.cancel()
            wait(pending)
        t2 = time.perf_counter_ns()
        for slot, fut in enumerate(futures):
            if not fut.cancelled() and fut.exception() is not None:
                raise ClientJobError(clients[slot], fut.exception()) from fut.exception()

        order = finished if completion else range(len(clients))
        uplinks = []
        for slot in order:
            up = futures[slot].result()
            if serialized:
                up.updated_params = decode_params(up_channels[slot].recv(), layout)
            uplinks.append(up)
        t3 = time.perf_counter_ns()
        timing = RoundTiming(t3 - t0, {"dispatch": t1 - t0, "compute": t2 - t1, "collect": t3 - t2})
        return uplinks, timing


def run_round(
    downlink: DownlinkPackage,
    sampled_clients: Sequence[int],
    client_fn: ClientFn,
    config: EngineConfig,
) -> list[UplinkPackage]:
    """One-shot round on a temporary pool of ``min(P, len(sampled_clients))`` workers."""
    with Engine(config) as engine:
        return engine.run_round(downlink, sampled_clients, client_fn)


def timed(
    downlink: DownlinkPackage,
    sampled_clients: Sequence[int],
    client_fn: ClientFn,
    config: EngineConfig,
) -> tuple[list[UplinkPackage], int, dict[str, int]]:
    with Engine(config) as engine:
        uplinks, timing = engine.timed_round(downlink, sampled_clients, client_fn)
    return uplinks, timing.wall_nanos, timing.breakdown
