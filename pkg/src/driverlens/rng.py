"""Counter-based random streams keyed by (master_seed, index, purpose tag).

Streams never depend on how many other streams were drawn before them, so
results are independent of execution order and worker count.
"""
import zlib

import numpy as np


def tag_id(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed, index, tag):
    """Return an independent ``numpy.random.Generator`` for one purpose."""
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(index), tag_id(tag)])
    return np.random.Generator(np.random.Philox(seq))
