"""Named random streams derived from one global seed.

``stream(seed, "mace", "worker", 3)`` always yields the same generator, and
distinct name paths give statistically independent generators.
"""
import os
import zlib

import numpy as np

SEED_ENV_VAR = "RECOVERKIT_SEED"


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed, *names):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed, *names):
    """A 63-bit integer seed for components that take ints (e.g. NetSpec.seed)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def resolve_seed(seed):
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env not in (None, "") else int(seed)
