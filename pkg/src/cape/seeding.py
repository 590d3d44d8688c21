"""Counter-based RNG streams derived from one root seed.

Each stream is addressed by a path of names/integers, so any single episode
can be replayed without running the ones before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def seed_sequence(root: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(p) for p in path))


def stream(root: int, *path) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(root, *path)))


def derive_int(root: int, *path) -> int:
    return int(seed_sequence(root, *path).generate_state(1, dtype=np.uint32)[0])
