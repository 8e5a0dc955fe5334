"""Named random streams.

Every consumer of randomness draws from its own PCG64 stream derived as
``SeedSequence(seed, spawn_key=(crc32(name), *extra))``. Turning a feature on
or off therefore never shifts the draws seen by another feature.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *(int(e) for e in extra)))
    return np.random.Generator(np.random.PCG64(seq))
