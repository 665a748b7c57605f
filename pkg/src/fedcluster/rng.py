"""Named, independent random streams derived from one master seed.

Every consumer asks for a stream by name (``"branch"``, ``"cluster"``,
``"data"``, ...) and an optional integer path (replication id, client id).
Streams are Philox generators keyed by a ``SeedSequence`` spawn key, so two
different names never share state and the same name always replays.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *path: int) -> np.random.Generator:
    """Return the generator for ``(seed, name, *path)``."""
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, path)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, name: str, *path: int) -> int:
    """A 63-bit child seed, for handing a fresh master seed to a sub-run."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, path)))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
