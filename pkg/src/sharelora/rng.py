"""Splittable random streams.

Every random draw in the package comes from a generator keyed by
``(master_seed, purpose, *indices)``. Streams with different keys are
statistically independent and do not depend on the order in which they are
created, so per-user or per-cell work can be scheduled in any order.
"""

import zlib

import numpy as np


def _tag(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, *indices):
    """Return a ``numpy.random.Generator`` for the given key."""
    key = (_tag(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
