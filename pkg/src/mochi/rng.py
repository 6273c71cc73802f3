"""Counter-style keyed random streams.

Every random draw in a run is taken from a generator keyed by a tuple of
integers, e.g. ``(seed, AUGMENT, epoch, step, sample, view)``. Generators are
never shared between keys, so the draws for one query do not depend on the
order in which other queries are processed or on the number of workers.
"""

import numpy as np

# stream identifiers, the second component of every key
INIT = 1
SHUFFLE = 2
AUGMENT = 3
SYNTH = 4
DATA = 5
SPLIT = 6
PAIRS = 7
DEMO = 8


def keyed_rng(*key: int) -> np.random.Generator:
    """Return a Philox generator whose state is a pure function of ``key``."""
    if not key:
        raise ValueError("empty rng key")
    words = [int(k) for k in key]
    if any(w < 0 for w in words):
        raise ValueError(f"rng key components must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def open_unit(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform draws on the open interval (0, 1).

    ``Generator.random`` samples [0, 1); exact zeros are redrawn.
    """
    u = rng.random(size)
    bad = u <= 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u <= 0.0
    return u
