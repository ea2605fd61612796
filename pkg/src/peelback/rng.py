"""Deterministic, splittable randomness for the simulation harness.

Every party and every protocol operation that consumes randomness draws from a
Rng derived from the run seed, so two runs with the same seed produce
byte-identical transcripts. Substreams are derived by hashing the parent key
with a label, which keeps independent parties' draws independent of scheduling
order. Library code accepts rng=None and falls back to OS randomness so the
package is usable outside the harness.
"""

from __future__ import annotations

import hashlib
import os
import random


class Rng:
    """SHA-256-keyed wrapper around random.Random with labeled substreams."""

    def __init__(self, key: bytes):
        if not isinstance(key, bytes):
            raise TypeError("rng key must be bytes")
        self._key = key
        self._rand = random.Random(int.from_bytes(hashlib.sha256(key).digest(), "big"))

    @classmethod
    def from_seed(cls, seed: int | str | bytes) -> "Rng":
        if isinstance(seed, int):
            material = seed.to_bytes(16, "big", signed=True)
        elif isinstance(seed, str):
            material = seed.encode()
        else:
            material = bytes(seed)
        return cls(hashlib.sha256(b"root:" + material).digest())

    def child(self, label: int | str | bytes) -> "Rng":
        """Independent substream; same (key, label) always yields the same stream."""
        if isinstance(label, int):
            label = label.to_bytes(16, "big", signed=True)
        elif isinstance(label, str):
            label = label.encode()
        return Rng(hashlib.sha256(self._key + b"/" + label).digest())

    def randbytes(self, n: int) -> bytes:
        return self._rand.randbytes(n)

    def randrange(self, *args: int) -> int:
        return self._rand.randrange(*args)

    def getrandbits(self, k: int) -> int:
        return self._rand.getrandbits(k)

    def choice(self, seq):
        return self._rand.choice(seq)

    def shuffle(self, seq) -> None:
        self._rand.shuffle(seq)

    def uniform(self, a: float, b: float) -> float:
        return self._rand.uniform(a, b)


class _SystemRng(Rng):
    """OS-entropy stand-in used when no deterministic rng is supplied."""

    def __init__(self):  # noqa: D401 - no key to keep
        self._key = b""
        self._rand = random.SystemRandom()

    def child(self, label: int | str | bytes) -> "Rng":
        return self

    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)


def system_rng() -> Rng:
    return _SystemRng()


def ensure_rng(rng: Rng | None) -> Rng:
    return rng if rng is not None else system_rng()
