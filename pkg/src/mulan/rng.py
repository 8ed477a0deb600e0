"""Counter-based random streams.

Every stochastic component draws from a Philox stream addressed by
(master seed, domain, coordinates).  Streams with distinct addresses never
overlap, and the numbers a stream yields depend only on its address -- not
on how many other streams were consumed first.  This is what makes
augmentation, data synthesis, and initialization independent of worker
scheduling.
"""

import numpy as np

# Domain tags keep unrelated consumers of the same master seed apart.
DOMAIN_DATA = 1
DOMAIN_MODEL = 2
DOMAIN_AUGMENT = 3
DOMAIN_EVAL = 4
DOMAIN_SHUFFLE = 5


def stream(seed: int, domain: int, a: int = 0, b: int = 0) -> np.random.Generator:
    """Return the generator addressed by (seed, domain, a, b).

    The variable coordinates sit in the high words of the Philox counter, so
    each stream has 2^64 blocks of private counter space.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, domain], dtype=np.uint64)
    counter = np.array([0, a, b, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
