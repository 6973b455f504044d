"""Counter-based RNG streams.

Streams are keyed by (seed, *stream ids) through a Philox generator, so
worker-parallel Monte Carlo draws are reproducible regardless of scheduling:
the same key always yields the same stream.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *ids: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))
