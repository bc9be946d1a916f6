"""Named sub-seeds derived from one global seed."""
import zlib

import numpy as np


def sub_seed(seed: int, *names) -> int:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n))
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> 1)


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, *names))
