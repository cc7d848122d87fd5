"""Deterministic, platform-independent random number generation.

The generator is xoshiro256** (Blackman & Vigna) seeded through SplitMix64.
Raw 64-bit draws are bit-identical on every platform for a given seed.
Uniform doubles use the top 53 bits of each draw; standard normals use the
Box-Muller transform over pairs of uniforms, so every ``normal`` call of
``n`` values consumes ``2 * ceil(n / 2)`` raw draws.

Independent streams for parallel shards come from :meth:`Rng.spawn`, which
applies the xoshiro256 jump polynomial (2**128 steps) ``index + 1`` times.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


def splitmix64(state: int) -> tuple[int, int]:
    """Return ``(new_state, output)`` for one SplitMix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3


@njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    raw = np.empty(2 * ((n + 1) // 2), dtype=np.uint64)
    _fill_u64(s, raw)
    scale = 1.0 / 9007199254740992.0
    for i in range(0, n, 2):
        u1 = 1.0 - float(raw[i] >> np.uint64(11)) * scale
        u2 = float(raw[i + 1] >> np.uint64(11)) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)


class Rng:
    """xoshiro256** stream. Not thread-safe; give each worker its own ``spawn``."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = np.array(words, dtype=np.uint64)

    # state (for checkpoints)
    def get_state(self) -> list[int]:
        return [int(w) for w in self._s]

    def set_state(self, state) -> None:
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256 state must be four words, not all zero")
        self._s = np.array([int(w) & MASK64 for w in state], dtype=np.uint64)

    def copy(self) -> "Rng":
        other = Rng.__new__(Rng)
        other.seed = self.seed
        other._s = self._s.copy()
        return other

    def jump(self) -> None:
        """Advance the stream by 2**128 draws."""
        acc = [0, 0, 0, 0]
        for word in _JUMP:
            for b in range(64):
                if (word >> b) & 1:
                    acc = [a ^ int(w) for a, w in zip(acc, self._s)]
                self.next_u64(1)
        self._s = np.array(acc, dtype=np.uint64)

    def spawn(self, index: int) -> "Rng":
        """Independent stream for shard ``index`` (non-overlapping by construction)."""
        child = self.copy()
        for _ in range(int(index) + 1):
            child.jump()
        return child

    # draws
    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        raw = self.next_u64(n)
        return ((raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)).reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n, dtype=np.float64)
        if n:
            _fill_normal(self._s, out)
        return out.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in ``[0, high)`` by scaling uniforms; bias is below 2**-40 for high < 2**13."""
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
