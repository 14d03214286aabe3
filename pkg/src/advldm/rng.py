"""Counter-based deterministic random source.

Raw bits come from numpy's Philox4x64 generator keyed by ``(seed, stream)``;
the stream is consumed strictly in order and ``position`` counts the 64-bit
words handed out so far. Normals use the Box-Muller transform so that the
whole pipeline (bits -> uniforms -> normals) is written down here and does
not depend on numpy's ziggurat implementation.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_NEG53 = 2.0**-53


class Rng:
    """Seeded, counter-driven sample stream.

    Two instances with the same ``seed`` and ``stream`` emit identical words.
    ``fork`` derives an independent stream without touching this one.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        if not 0 <= stream <= _MASK64:
            raise ValueError(f"stream must be a 64-bit unsigned integer, got {stream}")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bits = np.random.Philox(key=self.seed | (self.stream << 64))
        self.position = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, position={self.position})"

    def fork(self, stream: int) -> "Rng":
        """Independent generator for sub-stream ``stream`` of the same seed."""
        return Rng(self.seed, _mix(self.stream, stream))

    def raw(self, n: int) -> np.ndarray:
        words = self._bits.random_raw(n)
        self.position += n
        return np.asarray(words, dtype=np.uint64)

    def uniform(self, shape) -> np.ndarray:
        """Uniform doubles on the open interval (0, 1)."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        words = self.raw(n)
        # 53 high bits, shifted by half an ulp so 0 is never produced
        u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_NEG53
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((2, pairs))
        radius = np.sqrt(-2.0 * np.log(u[0]))
        angle = 2.0 * np.pi * u[1]
        out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return out[:n].reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers uniform on ``[low, high]`` inclusive."""
        if high < low:
            raise ValueError(f"empty integer range [{low}, {high}]")
        span = high - low + 1
        u = self.uniform(shape)
        return (low + np.floor(u * span)).astype(np.int64)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if size > n:
            raise ValueError(f"cannot choose {size} distinct items from {n}")
        idx = np.arange(n)
        u = self.uniform((size,))
        for i in range(size):
            j = i + int(u[i] * (n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:size].copy()


def sample_normal(rng: Rng, shape) -> np.ndarray:
    return rng.normal(shape)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def _mix(a: int, b: int) -> int:
    # splitmix64 finalizer over the pair, so fork(i) streams do not collide
    z = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)
