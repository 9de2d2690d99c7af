"""Counter-based seed derivation.

Every random stream in a run is keyed by a path of non-negative integers
below the master seed, e.g. ``(iteration, candidate)`` for a candidate's
training seed or ``(iteration, slot, attempt)`` for an LLM request. The
mapping goes through ``numpy.random.SeedSequence`` so nearby paths give
unrelated streams, and it does not depend on execution order.
"""
from __future__ import annotations

import numpy as np

# first path component separating independent uses of the master seed
TRAIN = 1
GENERATE = 2
EVAL = 3
EPISODE = 4


def derive_seed(master: int, *path: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
