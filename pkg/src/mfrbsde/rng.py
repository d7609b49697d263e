"""Counter-based random streams derived from one integer seed.

Every independent task (a replicate, a particle batch, a probe set) gets its own
Philox stream keyed by ``(seed, *keys)``, so results do not depend on the order
or the parallelism with which tasks are executed.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Return the generator for task ``keys`` under root ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
