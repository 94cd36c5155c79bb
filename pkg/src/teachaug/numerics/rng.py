"""Named, splittable random streams.

A stream is identified by its path of names below a root seed, so adding a
new consumer never shifts the draws seen by existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """The generator for ``name``; created on first use, then stateful."""
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in (*self.path, name)))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._streams[name] = gen
        return gen

    def split(self, name: str) -> RngStreams:
        return RngStreams(self.seed, (*self.path, name))

    def fresh(self, name: str, *salt: int) -> np.random.Generator:
        """A stateless generator keyed by ``name`` and integer salt (e.g. epoch)."""
        ss = np.random.SeedSequence([self.seed, *salt], spawn_key=tuple(_key(p) for p in (*self.path, name)))
        return np.random.Generator(np.random.PCG64(ss))

    def get_state(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self.stream(name).bit_generator.state = st
