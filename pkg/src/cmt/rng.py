"""Deterministic random streams.

Every stochastic operation in the package draws from an explicit
``numpy.random.Generator`` backed by the Philox counter-based algorithm.
Streams are keyed by tuples of non-negative integers: the same key always
produces the same stream, and distinct keys produce statistically
independent streams (``SeedSequence`` spreads the key entropy). This is what
makes N-worker and single-worker training see identical noise: per-sample
keys depend only on (seed, epoch, batch, position-in-batch), never on which
worker happens to process the sample.
"""

from __future__ import annotations

import numpy as np


def make_rng(*key: int) -> np.random.Generator:
    """Return a Philox generator deterministically keyed by ``key``."""
    if not key:
        raise ValueError("rng key must contain at least one integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def split(rng_key: tuple[int, ...], n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent generators from one key."""
    return [make_rng(*rng_key, i) for i in range(n)]
