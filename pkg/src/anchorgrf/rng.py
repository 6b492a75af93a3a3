"""Seeded random-stream derivation.

All randomness in the package flows from explicit integer seeds.  Consumers
never share a stream: each one derives an independent substream from
(master seed, purpose tag, indices...) so that results do not depend on
evaluation order or thread scheduling.
"""

from __future__ import annotations

import numpy as np

# Purpose tags.  Fixed small integers; never reuse or renumber, or archived
# runs stop being replayable.
TRUTH_FIELD = 1
LINEAR_PICK = 2
F0_PRIOR_DRAWS = 3
THETA_DRAW = 4
FIELD_SIM = 5
ENSEMBLE = 6
ORACLE = 7


def substream(seed: int, *tags: int) -> np.random.Generator:
    """Return an independent Generator for (seed, tags...).

    The same arguments always produce the same stream; distinct tag tuples
    produce streams that are independent for practical purposes.
    """
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags)))
