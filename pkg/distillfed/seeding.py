"""
Seed derivation
Every random stream is keyed by (seed, stream, ids...) so results never depend on scheduling
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    BLOBS = 1
    SPLIT = 2
    PARTITION = 3
    INIT_SUPPORT = 4
    DISTILL = 5
    GMM = 6
    MODEL_INIT = 7
    LOCAL_TRAIN = 8
    SERVER_TRAIN = 9
    STRAGGLER = 10


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed for (seed, keys)"""
    sequence = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(sequence.generate_state(1)[0])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))
