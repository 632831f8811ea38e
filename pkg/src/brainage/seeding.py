"""Counter-based random streams: one independent generator per (seed, stage, index)."""

import numpy as np

STAGE_LOADING = 1
STAGE_BETA = 2
STAGE_SUBJECT = 3
STAGE_BOOTSTRAP = 4
STAGE_REPEAT = 5
STAGE_SPLIT = 6


def stream(seed, *keys):
    """Generator keyed on a 64-bit seed and a tuple of non-negative integers."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *keys):
    """A child 63-bit integer seed, for handing to code that takes plain ints."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
