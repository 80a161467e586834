import numpy as np


def make_rng(seed, *stream):
    """Philox generator keyed by ``seed`` and an integer stream path.

    Streams are independent, so ``make_rng(s, 2, it)`` can be built in any
    order (or in parallel) without changing results.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
