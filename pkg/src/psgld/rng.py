"""Counter-based random streams derived from a single master seed.

Every consumer gets its own stream keyed by a fixed tag plus its
coordinates, so results never depend on the order in which streams are
created or on which thread uses them.
"""

import numpy as np

INIT = 0
SCHEDULE = 1
BLOCK = 2
SUBSAMPLE = 3
GIBBS = 4
LD = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def block_stream(seed: int, t: int, row_block: int, col_block: int) -> np.random.Generator:
    """Noise stream for one block update at iteration ``t``."""
    return stream(seed, BLOCK, t, row_block, col_block)
