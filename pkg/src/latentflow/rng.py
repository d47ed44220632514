"""Seed-reproducible random streams.

All randomness in the repo flows through numpy Generators backed by PCG64,
derived from integer key tuples via SeedSequence. A stream is fully
determined by its keys, so batch construction can be farmed out to any
number of workers without changing the values a given step sees.
"""

from __future__ import annotations

import numpy as np


def stream(*keys: int) -> np.random.Generator:
    """Generator keyed by (seed, worker_id, step, ...) style tuples."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))
