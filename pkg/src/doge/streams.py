"""Deterministic random substreams.

Every random draw in a run comes from a generator keyed by the run seed plus a
tuple of small integers naming the purpose and the (round, stage, step)
coordinates. Two runs that ask for the same key see the same numbers, no
matter what else they did before, which is what makes paired baseline/DoGe
comparisons and byte-identical reruns possible.
"""

from __future__ import annotations

import numpy as np

# purpose codes; appended to spawn keys, never reorder
TASKS = 1
ROLLOUT = 2
SOLVER = 3
EVAL = 4
CURRICULUM = 5
MEASURE = 6
GRADCHECK = 7

STAGE_CODES = {"warmup": 0, "stage1": 1, "stage2": 2, "eval": 3, "curriculum": 4}


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def stage_stream(seed: int, purpose: int, round_index: int, stage: str, step: int) -> np.random.Generator:
    return substream(seed, purpose, round_index, STAGE_CODES[stage], step)
