"""Counter-based random stream derivation.

Every random draw in a run comes from a generator keyed by
``(master_seed, purpose, *counters)``. Streams with different keys are
statistically independent, so turning on a diagnostic that consumes extra
randomness never shifts the training streams.
"""

from __future__ import annotations

import numpy as np

# Stable integer ids; never renumber an existing entry.
PURPOSES = {
    "data": 1,
    "partition": 2,
    "init": 3,
    "sample": 4,
    "local": 5,
    "heavy": 6,
    "test": 7,
}


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Return the generator for ``purpose`` at the given counters."""
    try:
        pid = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown random stream purpose {purpose!r}") from None
    key = (pid,) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
