"""Counter-based random streams.

A stream is keyed by ``(seed, stream_id)`` and positioned by ``counter``,
measured in Philox blocks (four 64-bit words each). Every draw starts at
a block boundary, so the words consumed by a call depend only on how
many values it asks for:

* ``uniform(n)`` advances the counter by ``ceil(n / 4)``.
* ``standard_normal(n)`` uses Box-Muller on ``2 * ceil(n / 2)`` uniforms,
  advancing the counter by ``ceil(2 * ceil(n / 2) / 4)``.

Child streams get a ``stream_id`` hashed from the parent id and a label,
so the sequence a child produces never depends on what other streams
were created or drawn from.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4


def _derive_id(parent: int, label) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(parent.to_bytes(8, "little"))
    h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed &= MASK64
        self.stream_id &= MASK64

    def child(self, label) -> "RngStream":
        return RngStream(self.seed, _derive_id(self.stream_id, label), 0)

    def _raw(self, n_words: int) -> np.ndarray:
        blocks = -(-n_words // _WORDS_PER_BLOCK)
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter & MASK64, self.counter >> 64, 0, 0], dtype=np.uint64),
        )
        self.counter += blocks
        return bitgen.random_raw(blocks * _WORDS_PER_BLOCK)[:n_words]

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws from the open interval (0, 1)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        raw = self._raw(n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def standard_normal(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be at least 1")
        pairs = -(-n // 2)
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def normal(self, shape, loc=0.0, scale=1.0) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape))
        if n == 0:
            return np.zeros(shape)
        return loc + scale * self.standard_normal(n).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[low, high)``."""
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)


def draw_standard_normal(stream: RngStream, n: int) -> np.ndarray:
    return stream.standard_normal(n)
