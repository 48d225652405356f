"""
Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
(master seed, replica index, purpose). Two streams with different keys are
statistically independent, and a stream never depends on which thread or in
which order replicas were run.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

__all__ = ["Purpose", "generator", "as_generator"]


class Purpose(IntEnum):
    CLOCKS = 1
    INIT_A = 2
    INIT_B = 3
    INIT_SHARED = 4
    MISC = 5


def generator(seed: int, replica: int = 0, purpose: int = Purpose.MISC) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed, purpose: int = Purpose.MISC) -> np.random.Generator:
    """Accept a Generator, an int master seed or a ``(seed, replica)`` pair."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        master, replica = seed
        return generator(master, replica, purpose)
    return generator(seed, 0, purpose)
