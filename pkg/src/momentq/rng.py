"""Seeded, splittable random streams.

Every random draw in the package goes through :func:`stream`, which keys a
PCG64 generator by ``(seed, *key)`` through ``numpy.random.SeedSequence``.
Two calls with the same arguments always produce the same generator, and
different keys give statistically independent substreams, so work that is
split across iterations, episodes or processes stays reproducible.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = f"numpy-{np.__version__}/PCG64/SeedSequence"

# Fixed substream tags, one per consumer.
SWEEP = 0
STREAM = 1
REPLAY = 2
EVAL = 3
ORACLE = 4
INIT = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for substream ``key`` of ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
