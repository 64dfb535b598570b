"""Counter-based random streams.

A stream is identified by ``(seed, stream)``; each draw advances a 64-bit
counter.  The bits come from numpy's Philox, whose output is a pure function
of key and counter, so the same ``(seed, stream, counter)`` triple always
reproduces the same draw regardless of how other streams were used.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, stream: str) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(stream.encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Named, counter-addressed random stream.

    ``counter`` counts draw calls on this stream.  Each call gets its own
    Philox block range (``counter`` is placed in the high word of the Philox
    counter), so draw ``k`` never depends on the size of draws ``< k``.
    """

    def __init__(self, seed: int, stream: str = "root", counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        self.counter = int(counter)
        self._key = _key(self.seed, stream)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r}, counter={self.counter})"

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}")

    def generator(self, counter: int | None = None) -> np.random.Generator:
        """numpy Generator positioned at ``counter`` (default: next draw)."""
        if counter is None:
            counter = self.counter
            self.counter += 1
        # Philox counter is 4x64 bits; the draw index goes in the top word
        ctr = np.array([0, 0, 0, counter], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self._key, counter=ctr))

    def normal(self, shape, dtype=np.float64):
        return self.generator().standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, shape=None, dtype=np.float64):
        return np.asarray(self.generator().uniform(low, high, shape), dtype=dtype)

    def integers(self, low, high, shape=None):
        """Integers in ``[low, high)``."""
        return self.generator().integers(low, high, shape)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["stream"], state["counter"])
