"""Deterministic random streams.

A counter-based generator built on the splitmix64 mixing function: the i-th
raw draw is a pure function of (seed, i), so streams are reproducible across
runs and platforms and the full state is just two integers.  Normal samples
use the Box-Muller transform.
"""

from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar splitmix64 finalizer, used to derive sub-stream seeds."""
    return int(_mix(np.asarray([value & _MASK], dtype=np.uint64))[0])


class Rng:
    """Reproducible random stream with an explicit (seed, counter) state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state) -> "Rng":
        seed, counter = state
        return cls(seed, counter)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; deterministic in (seed, key)."""
        return Rng(mix64(self.seed ^ mix64(key ^ 0x5851F42D4C957F2D)))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix(np.uint64(self.seed) + (idx + np.uint64(1)) * _GAMMA)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n i.i.d. draws from U[low, high), float64."""
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        if low != 0.0 or high != 1.0:
            u = low + u * (high - low)
        return u

    def normal(self, shape) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller, float64, given shape."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        total = int(np.prod(shape)) if shape else 1
        pairs = (total + 1) // 2
        # u1 in (0, 1] so the log is always finite.
        u1 = ((self._raw(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (self._raw(pairs) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:total]
        return out.reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n draws uniform over {0, ..., bound-1} (by scaling, fine for desk use)."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of range(n)."""
        return np.argsort(self.uniform(n), kind="stable")
