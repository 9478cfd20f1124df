"""Counter-based random streams for reproducible parallel ensembles.

Each trajectory owns a Philox stream keyed by (master seed, trajectory id), so
the realized randomness is a pure function of those two integers: results match
bitwise no matter how trajectories are batched, ordered, or distributed.
"""

from __future__ import annotations

import numpy as np

MASTER_TAG = 0x5F0C  # distinguishes the shared stream from trajectory streams


def trajectory_rng(master_seed: int, trajectory_id: int) -> np.random.Generator:
    if master_seed < 0 or trajectory_id < 0:
        raise ValueError("seed and trajectory id must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[master_seed, trajectory_id]))


def master_rng(master_seed: int) -> np.random.Generator:
    """Stream for ensemble-level draws not tied to one trajectory."""
    if master_seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[master_seed, MASTER_TAG]))
