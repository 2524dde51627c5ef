"""Seed derivation and isolated xoshiro256** streams.

Every stochastic decision in a simulation draws from an :class:`RngStream`
that is derived from ``(base_seed, domain, client_id, round)``.  Streams are
plain single-owner objects: nothing in this module touches global random
state, so a client's draws do not depend on which worker thread runs it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, TypeVar

import numba
import numpy as np

__all__ = [
    "SeedDomain",
    "RngStream",
    "RngStreamSuite",
    "derive_seed",
    "make_stream",
    "make_suite",
    "next_uniform",
    "next_gaussian",
    "shuffle",
    "sample_without_replacement",
    "splitmix64_finalize",
]

MASK64 = 0xFFFFFFFFFFFFFFFF

# Frozen mixing constants; changing any of them changes every derived stream.
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
SEED_MUL_DOMAIN = 0x9E3779B97F4A7C15
SEED_MUL_CLIENT = 0xC2B2AE3D27D4EB4F
SEED_MUL_ROUND = 0x165667B19E3779F9
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Substituted for an all-zero state, which xoshiro cannot leave.
_ZERO_STATE_GUARD = GOLDEN_GAMMA

_TWO_M53 = 2.0**-53

T = TypeVar("T")


class SeedDomain(enum.IntEnum):
    """Purpose tags mixed into :func:`derive_seed`."""

    SERVER_INIT = 1
    CLIENT_SAMPLING = 2
    CLIENT_SHUFFLE = 3
    CLIENT_AUGMENT = 4
    CLIENT_DROPOUT = 5
    EVAL_SHUFFLE = 6  # reserved: evaluation never shuffles


def splitmix64_finalize(x: int) -> int:
    x &= MASK64
    x ^= x >> 30
    x = (x * _MIX1) & MASK64
    x ^= x >> 27
    x = (x * _MIX2) & MASK64
    x ^= x >> 31
    return x


def derive_seed(base_seed: int, domain: SeedDomain | int, client_id: int, round: int) -> int:
    """Mix the four coordinates of a stream into one 64-bit seed."""
    x = splitmix64_finalize((base_seed & MASK64) ^ ((int(domain) * SEED_MUL_DOMAIN) & MASK64))
    x = splitmix64_finalize(x ^ ((client_id * SEED_MUL_CLIENT) & MASK64))
    x = splitmix64_finalize(x ^ ((round * SEED_MUL_ROUND) & MASK64))
    return x


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


# Bulk generation kernels.  All constants are explicit uint64 so numba never
# promotes the arithmetic to float64.
_U5 = np.uint64(5)
_U7 = np.uint64(7)
_U9 = np.uint64(9)
_U11 = np.uint64(11)
_U17 = np.uint64(17)
_U32 = np.uint64(32)
_U45 = np.uint64(45)
_U57 = np.uint64(57)
_U19 = np.uint64(19)


@numba.njit(cache=True, nogil=True)
def _xoshiro_fill(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        m = s1 * _U5
        out[i] = ((m << _U7) | (m >> _U57)) * _U9
        t = s1 << _U17
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << _U45) | (s3 >> _U19)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


@numba.njit(cache=True, nogil=True)
def _fisher_yates(draws, n):
    # draws[t] serves index i = n-1-t; bound i+1 via multiply-shift.
    perm = np.arange(n)
    for t in range(n - 1):
        i = n - 1 - t
        j = np.int64(((draws[t] >> _U32) * np.uint64(i + 1)) >> _U32)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm


@numba.njit(cache=True, nogil=True)
def _partial_fisher_yates(draws, n, k):
    perm = np.arange(n)
    for i in range(k):
        j = i + np.int64(((draws[i] >> _U32) * np.uint64(n - i)) >> _U32)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm[:k].copy()


@numba.njit(cache=True, nogil=True)
def _box_muller(draws):
    n = draws.shape[0] // 2
    out = np.empty(n, dtype=np.float64)
    two_pi = 2.0 * math.pi
    for i in range(n):
        u1 = np.float64(draws[2 * i] >> _U11) * _TWO_M53
        u2 = np.float64(draws[2 * i + 1] >> _U11) * _TWO_M53
        if u1 == 0.0:
            u1 = _TWO_M53
        out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)
    return out


class RngStream:
    """A xoshiro256** generator with a draw-count audit.

    ``consumed`` counts 64-bit outputs.  Every operation consumes a number of
    draws that depends only on its input sizes.
    """

    __slots__ = ("_s", "consumed")

    def __init__(self, state: Sequence[int]):
        s = [int(v) & MASK64 for v in state]
        if len(s) != 4:
            raise ValueError("xoshiro256** state needs four 64-bit words")
        if not any(s):
            s[0] = _ZERO_STATE_GUARD
        self._s = s
        self.consumed = 0

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)  # type: ignore[return-value]

    def clone(self) -> RngStream:
        other = RngStream(self._s)
        other.consumed = self.consumed
        return other

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        self.consumed += 1
        return result

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` raw draws; identical to ``n`` calls of :meth:`next_u64`."""
        out = np.empty(n, dtype=np.uint64)
        if n:
            st = np.array(self._s, dtype=np.uint64)
            _xoshiro_fill(st, out)
            self._s = [int(v) for v in st]
            self.consumed += n
        return out

    def next_uniform(self) -> float:
        return (self.next_u64() >> 11) * _TWO_M53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def next_gaussian(self) -> float:
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        if u1 == 0.0:
            u1 = _TWO_M53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gaussians(self, n: int) -> np.ndarray:
        return _box_muller(self.u64_array(2 * n))

    def bounded(self, n: int) -> int:
        """Integer in ``[0, n)`` by multiply-shift of the high 32 bits.

        No rejection step, so exactly one draw is consumed.  The result is
        biased by at most ``n / 2**32`` relative to uniform.
        """
        if not 1 <= n <= 1 << 32:
            raise ValueError(f"bound must be in [1, 2**32], got {n}")
        return ((self.next_u64() >> 32) * n) >> 32

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``; consumes ``max(n-1, 0)`` draws."""
        if n <= 1:
            return np.arange(n)
        return _fisher_yates(self.u64_array(n - 1), n)

    def __repr__(self) -> str:
        return f"RngStream(consumed={self.consumed})"


def make_stream(seed: int) -> RngStream:
    """Expand a 64-bit seed into xoshiro state with four SplitMix64 outputs."""
    x = seed & MASK64
    words = []
    for _ in range(4):
        x = (x + GOLDEN_GAMMA) & MASK64
        words.append(splitmix64_finalize(x))
    return RngStream(words)


def next_uniform(stream: RngStream) -> float:
    return stream.next_uniform()


def next_gaussian(stream: RngStream) -> float:
    return stream.next_gaussian()


def shuffle(stream: RngStream, items: Sequence[T]) -> list[T]:
    """Return a permuted copy of ``items`` (Fisher-Yates, last index downward)."""
    items = list(items)
    perm = stream.permutation(len(items))
    return [items[i] for i in perm]


def sample_without_replacement(stream: RngStream, n: int, k: int) -> list[int]:
    """Pick ``k`` distinct indices from ``range(n)`` in selection order."""
    if k < 0 or n < 0:
        raise ValueError(f"n and k must be non-negative, got n={n}, k={k}")
    if k > n:
        raise ValueError(f"cannot sample k={k} items from n={n}")
    if k == 0:
        return []
    return [int(i) for i in _partial_fisher_yates(stream.u64_array(k), n, k)]


@dataclass
class RngStreamSuite:
    """The per-client bundle of streams for one round."""

    client_id: int
    round: int
    shuffle: RngStream
    augment: RngStream
    dropout: RngStream


def make_suite(base_seed: int, client_id: int, round: int) -> RngStreamSuite:
    def stream(domain: SeedDomain) -> RngStream:
        return make_stream(derive_seed(base_seed, domain, client_id, round))

    return RngStreamSuite(
        client_id=client_id,
        round=round,
        shuffle=stream(SeedDomain.CLIENT_SHUFFLE),
        augment=stream(SeedDomain.CLIENT_AUGMENT),
        dropout=stream(SeedDomain.CLIENT_DROPOUT),
    )
