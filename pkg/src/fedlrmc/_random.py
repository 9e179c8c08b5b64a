"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based, 64-bit)
generator keyed by ``(seed, stream, *extra)``.  Distinct purposes use distinct
stream ids so that, e.g., changing the number of trials never perturbs the
ground truth.
"""
import numpy as np

GROUND_TRUTH = 0
MASK = 1
SPLIT = 2
NOISE = 3
POWER = 4
TRIAL = 5


def make_rng(seed, stream, *extra):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),) + tuple(int(e) for e in extra))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, stream, *extra):
    """Return a 63-bit integer seed derived from ``seed`` on the given stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),) + tuple(int(e) for e in extra))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
