"""Deterministic counter-based random streams.

Every random draw in an inference run is a pure function of
``(seed, stream path, draw index)``, so results do not depend on thread
scheduling or on how work is split across workers. Streams are derived
by hashing a path of labels (e.g. seed, particle slot, step index) into
a 64-bit key; the i-th value of a stream is a SplitMix64-style mix of
``key + (i + 1) * GOLDEN``.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: int) -> int:
    """SplitMix64 finalizer: bijective avalanche mix of a 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *path: int | str) -> int:
    """Derive a 64-bit stream key from a seed and a path of labels.

    Uses BLAKE2b over a canonical encoding, so distinct paths give
    independent keys and the mapping is stable across platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        if isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


class RandomStream:
    """A stateless-by-construction uniform stream over a derived key.

    The stream holds only a draw counter; value ``i`` is always the same
    for the same key, which makes every consumer replayable.
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, *path: int | str):
        self.key = derive_key(seed, *path)
        self.counter = 0

    @classmethod
    def from_key(cls, key: int) -> "RandomStream":
        stream = cls.__new__(cls)
        stream.key = key & _MASK64
        stream.counter = 0
        return stream

    def uniform(self) -> float:
        """Next uniform draw in [0, 1)."""
        value = _mix(self.key + (self.counter + 1) * _GOLDEN)
        self.counter += 1
        return (value >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """Vector of the next ``n`` uniform draws in [0, 1)."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = (np.uint64(self.key) + idx * np.uint64(_GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def choice(self, probs) -> int:
        """Draw an index proportional to ``probs`` (nonnegative weights).

        Zero-probability entries are never selected.
        """
        target = self.uniform() * float(np.sum(probs))
        acc = 0.0
        last_positive = -1
        for i, p in enumerate(probs):
            if p > 0.0:
                last_positive = i
                acc += p
                if acc > target:
                    return i
        if last_positive < 0:
            raise ValueError("choice over all-zero weights")
        return last_positive  # target hit the top of the cumulative range

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        span = high - low
        return low + int(self.uniform() * span)
