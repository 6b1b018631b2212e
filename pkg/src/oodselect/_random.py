"""Named random substreams.

All randomness flows from one integer root seed. A job asks for
``substream(seed, "fit", "restart", 3)`` and always gets the same generator,
whichever worker runs it and in whatever order.
"""
import hashlib

import numpy as np


def _key(part):
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed, *names):
    """Return a ``numpy.random.Generator`` for the named path under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def check_random_seed(seed):
    if seed is None:
        return 0
    if isinstance(seed, (np.integer, int)) and not isinstance(seed, bool):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        return int(seed)
    raise TypeError(f"seed must be an int, got {type(seed).__name__}")
