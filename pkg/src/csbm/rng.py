"""Seeded random streams.

Every random draw in the library comes from a Philox generator (counter
based, so streams can be derived and consumed independently in parallel
workers). A master integer seed is expanded with :class:`numpy.random.SeedSequence`
and a fixed *stream id* placed in the spawn key::

    master seed ──┬─ (INSTANCE,)   ─┬─ (INSTANCE, LABELS)
                  │                 ├─ (INSTANCE, GRAPH)
                  │                 ├─ (INSTANCE, CENTROIDS)
                  │                 └─ (INSTANCE, NOISE)
                  ├─ (SUPERVISION,)
                  ├─ (INIT,)        initialization noise of the solvers
                  ├─ (MCMC,)
                  └─ (LOGISTIC,)

The same integer can therefore be used for the instance, the supervision and
the solver without the streams being correlated. The graph stream does not
depend on the feature dimension, so instances that differ only in ``P`` share
their labels and graph.
"""
from __future__ import annotations

import numpy as np

INSTANCE = 0
SUPERVISION = 1
INIT = 2
MCMC = 3
LOGISTIC = 4
SWEEP = 5

# sub-streams of INSTANCE
LABELS = 0
GRAPH = 1
CENTROIDS = 2
NOISE = 3


def _entropy(seed: int) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seeds must be non-negative integers")
    return seed


def generator(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed`` restricted to the sub-stream ``stream``."""
    ss = np.random.SeedSequence(_entropy(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *words: int) -> int:
    """Deterministic 63-bit child seed from a master seed and integer words."""
    ss = np.random.SeedSequence([_entropy(seed), *[int(w) & 0xFFFFFFFF for w in words]])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & 0x7FFFFFFFFFFFFFFF)
