"""Deterministic, cross-platform PRNG: xoshiro256** seeded via splitmix64.

Every stochastic choice in this package (dataset sampling, weight init,
batch shuffling, probe directions) draws from this generator so that a
(seed, purpose) pair reproduces bit-identical streams on any platform,
independent of numpy's generator internals.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into `seed` to get an independent child seed."""
    state = seed & _MASK64
    for tag in tags:
        state, out = splitmix64(state ^ (tag & _MASK64))
        state = out
    state, out = splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** core with splitmix64 state expansion."""

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s
        self._spare_normal = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=np.float64)

    def normal(self) -> float:
        """Standard normal via Box-Muller (cached spare)."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 must be nonzero for the log
        u1 = 0.0
        while u1 == 0.0:
            u1 = self.random()
        u2 = self.random()
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        self._spare_normal = float(r * np.sin(theta))
        return float(r * np.cos(theta))

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        out = np.array([self.normal() for _ in range(n)], dtype=np.float64)
        return out.reshape(shape)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.array(idx, dtype=np.int64)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} from {n} without replacement")
        return self.permutation(n)[:k]

    def unit_vector(self, dim: int) -> np.ndarray:
        """Uniform direction on the unit sphere."""
        while True:
            v = self.normals(dim)
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm

    def rademacher(self, dim: int) -> np.ndarray:
        return np.array(
            [1.0 if (self.next_u64() >> 63) else -1.0 for _ in range(dim)],
            dtype=np.float64,
        )
