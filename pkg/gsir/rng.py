"""Named, splittable random streams derived from a single root seed."""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def named_rng(seed: int, *names) -> np.random.Generator:
    # same (seed, names) -> same stream on every platform
    entropy = [int(seed)] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
