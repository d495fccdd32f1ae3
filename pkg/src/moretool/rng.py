"""Seeded random streams.

All randomness in moretool comes from numpy's PCG64 generator. Independent
child streams are derived with ``SeedSequence(seed, spawn_key=...)``: one
stream per (purpose, epoch, layer name), so adding a layer or reordering
calls in one place does not shift the random numbers seen elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """A generator for ``seed`` and a path of int or str keys."""
    spawn_key = tuple(_key(k) if isinstance(k, str) else int(k) for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


class RngStreams:
    """Per-layer generators for one epoch of training.

    ``get(name)`` returns the same generator object for the same layer name
    for the life of this instance, so successive batches in an epoch continue
    the layer's stream.
    """

    def __init__(self, seed: int, epoch: int = 0):
        self.seed = seed
        self.epoch = epoch
        self._cache: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._cache.get(name)
        if gen is None:
            gen = self._cache[name] = stream(self.seed, "layer", self.epoch, name)
        return gen
