"""Named, order-independent random streams derived from one integer seed."""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the stream ``seed/names...``; same names give the same stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names)))


def subseed(seed: int, *names) -> int:
    """A 63-bit integer seed for APIs that take an int."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64)) >> 1
