"""Seeded, splittable random streams.

All randomness goes through numpy's PCG64 bit generator (128-bit LCG state
with a permuted 64-bit output). A stream is identified by a root seed plus a
path of keys, e.g. ``stream(7, "init", "blocks.0.mha.w_q")`` or
``stream(7, "dropout", epoch)``. The path is folded into the
``SeedSequence`` spawn key, so streams are independent of each other and of
the order in which they are requested.
"""
import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _key(part):
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream keys must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        # crc32 is stable across processes, unlike hash()
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key {part!r}")


def stream(seed, *path):
    """Return an independent ``np.random.Generator`` for ``(seed, *path)``."""
    seq = np.random.SeedSequence(int(seed) & MASK64, spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
