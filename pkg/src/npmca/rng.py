"""Deterministic random number generation.

Every stochastic routine in the package draws from a generator built here,
so any run is reproducible from its integer seed. PCG64 is used as the
backing bit generator: it is seeded with 64-bit entropy and produces the
same stream on every platform.
"""

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Return the generator for a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent generator derived from (seed, keys).

    Distinct key tuples give statistically independent streams, which lets
    one master seed drive several consumers (init, sampling, textures)
    without them sharing state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))
