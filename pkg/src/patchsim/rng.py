"""Named deterministic random streams.

All randomness in the package flows from a single integer seed through
named sub-streams (data, init, dropout, rollout, ...). A stream is keyed
by the root seed plus a tuple of labels/integers, so independent parts of
the pipeline never share or race a generator.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_ints(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(p).encode("utf-8")))
    return out


def stream(seed: int, *parts) -> np.random.Generator:
    """Return a fresh Generator for (seed, *parts); same key, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_ints(parts)))
    return np.random.Generator(np.random.Philox(ss))
