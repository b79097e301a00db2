"""Named, buffered random substreams and replication seed derivation."""
from __future__ import annotations

import hashlib

import numpy as np

STREAM_NAMES = ("arrivals", "routing", "service", "policy")
_BLOCK = 1 << 14


def seed_plan(root_seed: int, replication_index: int) -> int:
    """Per-replication seed: first 8 bytes of BLAKE2b over ``(root, index)``.

    Both integers are encoded as signed 16-byte big-endian values, so the
    mapping is the same on every platform.
    """
    payload = int(root_seed).to_bytes(16, "big", signed=True) + int(
        replication_index
    ).to_bytes(16, "big", signed=True)
    digest = hashlib.blake2b(payload, digest_size=8, person=b"pullsim-seed").digest()
    return int.from_bytes(digest, "big") >> 1


class Stream:
    """Block-buffered wrapper around a numpy ``Generator``.

    Drawing scalars one at a time from numpy is slow; this pulls blocks and
    hands them out in order, so the sequence depends only on the seed.
    """

    __slots__ = ("_gen", "_u", "_ui", "_e", "_ei")

    def __init__(self, seed_seq: np.random.SeedSequence):
        self._gen = np.random.Generator(np.random.PCG64(seed_seq))
        self._u = []
        self._ui = 0
        self._e = []
        self._ei = 0

    def random(self) -> float:
        """Uniform on [0, 1)."""
        i = self._ui
        if i >= len(self._u):
            self._u = self._gen.random(_BLOCK).tolist()
            i = 0
        self._ui = i + 1
        return self._u[i]

    def open_uniform(self) -> float:
        """Uniform on (0, 1]; safe for logarithms and negative powers."""
        return 1.0 - self.random()

    def exponential(self) -> float:
        """Standard (rate 1) exponential."""
        i = self._ei
        if i >= len(self._e):
            self._e = self._gen.standard_exponential(_BLOCK).tolist()
            i = 0
        self._ei = i + 1
        return self._e[i]

    def below(self, n: int) -> int:
        """Uniform integer in ``range(n)``."""
        k = int(self.random() * n)
        return k if k < n else n - 1


def make_streams(seed: int, names=STREAM_NAMES) -> dict:
    root = np.random.SeedSequence(int(seed))
    children = root.spawn(len(names))
    return {name: Stream(child) for name, child in zip(names, children)}
