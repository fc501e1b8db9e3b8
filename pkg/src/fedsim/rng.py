"""Deterministic random-stream derivation.

Every random draw in the package comes from a generator keyed by a tuple of
integers (master seed, purpose tag, indices such as round or client id), so
serial and concurrent execution produce identical results and no component
ever touches global RNG state.
"""
from __future__ import annotations

import numpy as np

# Purpose tags keeping derived streams disjoint.
TAG_DATA = 1
TAG_TEST_SPLIT = 2
TAG_PARTITION = 3
TAG_CLIENT_SPLIT = 4
TAG_INIT = 5
TAG_SAMPLE = 6
TAG_CLIENT = 7
TAG_PLAN = 8
TAG_DISTILL = 9


def derive_rng(*key: int) -> np.random.Generator:
    """Generator seeded by an integer key tuple; same key, same stream."""
    return np.random.default_rng([int(k) for k in key])


def derive_seed(*key: int) -> list[int]:
    """Key tuple in the form accepted as a `seed` argument."""
    return [int(k) for k in key]
