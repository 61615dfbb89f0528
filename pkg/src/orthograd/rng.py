"""The single PRNG family used everywhere: PCG64 keyed by (seed, stream path)."""
from __future__ import annotations

import numpy as np

PRNG_NAME = "numpy.PCG64/SeedSequence"

STREAM_INIT = 1
STREAM_DATA_ORDER = 2
STREAM_SYNTHETIC = 3
STREAM_MONTE_CARLO = 4


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for a (seed, stream...) path; same path, same draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(stream))))
