"""Counter-based random streams with stable derivation paths.

Every stochastic component draws from a Philox stream derived from
(seed, *path). Streams with distinct paths are statistically independent
and do not depend on the order in which they are created, so per-token or
per-grid-point work can run in parallel without changing any result.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the derivation path (seed, *path)."""
    entropy = tuple((int(x)) & _MASK64 for x in (seed, *path))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
