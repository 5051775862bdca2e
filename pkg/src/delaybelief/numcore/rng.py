"""Named, counter-based random streams.

Each run owns one :class:`RngStreams`. A stream is a Philox generator keyed on
``(seed, name)``, so adding a new consumer never perturbs existing streams.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> tuple[int, ...]:
    raw = name.encode("utf-8")
    return (zlib.crc32(raw), zlib.adler32(raw), len(raw))


def make_generator(seed: int, name: str = "default") -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(ss))


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = make_generator(self.seed, name)
        return gen

    __getitem__ = stream

    def child(self, name: str) -> "RngStreams":
        """A fresh family of streams derived from this seed and ``name``."""
        return RngStreams(int(make_generator(self.seed, "child/" + name).integers(0, 2**63)))
