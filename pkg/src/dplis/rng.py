"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(master seed, purpose, *counters)``. A stream never depends on how many
draws some other stream has made, so results do not change with execution
order or the number of worker threads.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    INIT = 1
    BATCH = 2
    DP_NOISE = 3
    SMOOTH = 4
    SMOOTH_IMPLICIT = 5
    TOY_INIT = 6
    SLICE = 7
    SHARPNESS = 8
    PATE_SPLIT = 9
    PATE_TEACHER = 10
    PATE_AGGREGATE = 11
    PATE_STUDENT = 12
    DATA = 13
    MC = 14


def stream(seed: int, purpose: Purpose | int, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *counters)``."""
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), *map(int, counters)))
    return np.random.Generator(np.random.Philox(ss))
