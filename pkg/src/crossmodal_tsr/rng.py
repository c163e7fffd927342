"""Named, seedable random streams.

Every stochastic draw in the package flows through a stream keyed by
(seed, purpose, *counters). Streams are created fresh from the key, so
reproducing any draw needs only the key — nothing mutable has to be
serialized for checkpoint/resume to be exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _purpose_code(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Fresh generator for a (seed, purpose, counters...) key."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, _purpose_code(purpose)]
    key.extend(int(c) & 0xFFFFFFFFFFFFFFFF for c in counters)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
