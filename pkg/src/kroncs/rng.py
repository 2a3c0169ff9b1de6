"""Keyed random sub-streams.

Every random draw in the package comes from ``substream(seed, *keys)``,
a Philox (counter-based) generator keyed by the integer path. Sample ``k``
of a run therefore always sees the same numbers, whatever the execution
order or worker count.
"""

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
