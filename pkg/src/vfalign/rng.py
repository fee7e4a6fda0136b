"""Seeded random streams.

Each stream is a numpy ``Generator`` over the Philox-4x64 counter-based bit
generator. The 128-bit Philox key is the first 16 bytes of
``blake2b(f"{seed}/{name}")`` read as two little-endian uint64 words, and
the counter starts at zero. Named child streams hash the full path, so
``Rng(7).child("data")`` and ``Rng(7).child("batch")`` never overlap and do
not depend on how much either one has been consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _philox_key(path: str) -> np.ndarray:
    digest = hashlib.blake2b(path.encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


class Rng:
    """A single-owner deterministic random stream."""

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) & SEED_MASK
        self.path = path
        bitgen = np.random.Philox(key=_philox_key(f"{self.seed}/{path}"))
        self.gen = np.random.Generator(bitgen)

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}" if self.path else name)

    # thin pass-throughs so callers rarely need .gen
    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, high, size=None):
        return self.gen.integers(0, high, size)

    def choice(self, a, size, replace=False):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"
