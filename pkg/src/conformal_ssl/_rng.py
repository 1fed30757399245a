"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
tuple ``(seed, stream, *counters)``.  Two calls with the same key produce
the same stream no matter which thread or in what order they run, which is
what makes serial and parallel inference identical.
"""

from __future__ import annotations

import numpy as np

# stream tags
INIT = 1
TRAIN = 2
SPLIT = 3
CALIB_U = 4
MC_DROPOUT = 5
PREDICT_U = 6
DATA = 7


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in key)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit child seed, for handing to APIs that take an int."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in key)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
