"""Deterministic named random sub-streams derived from one master seed.

Every source of randomness in the project draws from `substream(seed,
*names)`. The names keep the streams independent, so changing how one
component consumes randomness never shifts what another component sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def substream(seed: int, *names: str) -> np.random.Generator:
    """A generator keyed by the master seed plus a path of names."""
    entropy: list[int] = [int(seed) & 0xFFFFFFFF]
    for name in names:
        entropy.extend(_name_words(name))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
