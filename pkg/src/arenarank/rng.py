"""Named random substreams derived from a single integer seed."""
from __future__ import annotations

import secrets
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.SeedSequence:
    """Seed sequence for the stream ``names`` under ``seed``.

    Derivation only depends on the names, so adding a stream never shifts
    the others and parallel callers get identical draws to serial ones.
    """
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))


def generator(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *names))


def fresh_seed() -> int:
    return secrets.randbits(63)
