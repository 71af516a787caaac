"""Seedable xoshiro256** random streams.

One generator family is used for every source of randomness in the package
(splits, masks, weight init, synthetic data) so that a (seed, stream label)
pair fully determines a run. Reproducibility is within-implementation; no
cross-language bit contract is claimed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


class Rng:
    """xoshiro256** generator seeded from (seed, stream label).

    The label partitions one user-facing seed into independent streams
    ("init", "mask", ...) without manual seed bookkeeping.
    """

    def __init__(self, seed: int, stream: str = ""):
        self.seed = seed
        self.stream = stream
        sm = (seed & _MASK64) ^ _fnv1a64(stream.encode("utf-8"))
        state = []
        for _ in range(4):
            sm, word = _splitmix64(sm)
            state.append(word)
        if not any(state):
            state[0] = 1  # xoshiro state must not be all-zero
        self._s0, self._s1, self._s2, self._s3 = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s1 * 5) & _MASK64
        result = ((x << 7 | x >> 57) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << 45 | s3 >> 19) & _MASK64
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """One float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        nxt = self.next_u64
        return np.array([(nxt() >> 11) * 2.0**-53 for _ in range(n)], dtype=np.float64)

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller; (u1, u2) pairs drawn in stream order."""
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        nxt = self.next_u64
        # u1 in (0, 1] so log never sees zero
        u1 = np.array([((nxt() >> 11) + 1) * 2.0**-53 for _ in range(pairs)])
        u2 = np.array([(nxt() >> 11) * 2.0**-53 for _ in range(pairs)])
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def bounded(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("bounded() needs n > 0")
        threshold = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < threshold:
                return x % n

    def shuffle(self, arr: np.ndarray) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(arr) - 1, 0, -1):
            j = self.bounded(i + 1)
            arr[i], arr[j] = arr[j], arr[i]

    def permutation(self, n: int) -> np.ndarray:
        out = np.arange(n)
        self.shuffle(out)
        return out

    def sample_no_replace(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.bounded(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return np.array(pool[:k], dtype=np.int64)
