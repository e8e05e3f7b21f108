"""Deterministic random number generation.

All randomness flows through counter-based Philox generators keyed by a
user seed plus a named stream index, so results are bit-identical for a
fixed seed regardless of call order across streams.
"""

from __future__ import annotations

import numpy as np

# Stable stream indices. Appending is fine; reordering breaks replay.
STREAMS = {
    "init": 0,
    "guidance": 1,
    "batch": 2,
    "debug": 3,
}


def generator(seed: int, stream: str | int = "init") -> np.random.Generator:
    if isinstance(stream, str):
        stream = STREAMS[stream]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, index: int) -> int:
    """A child seed for item `index` of a batch, independent across items."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS["batch"], int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
