"""Named random streams derived from one root seed.

Each stream is a Philox (counter-based) generator keyed by the root seed and a
hash of the stream name, so adding a beacon never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    """Fresh generator for ``(seed, name)``; identical arguments give identical draws."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(name))
    return np.random.Generator(np.random.Philox(ss))


class RngStreams:
    """Lazily created, cached named streams for one run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = stream(self.seed, name)
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """Uncached generator positioned at draw index 0."""
        return stream(self.seed, name)
