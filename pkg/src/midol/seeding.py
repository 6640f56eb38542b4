"""Named, independent random streams derived from one global seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for ``(seed, name, *index)``.

    Streams are keyed by name rather than by draw order, so adding a new
    consumer never shifts the numbers another consumer sees.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
