"""Named, reproducible random streams.

Each subsystem draws from its own PCG64 stream derived from one integer seed,
so adding draws in one place never shifts the numbers seen by another.
"""
from __future__ import annotations

import numpy as np

STREAMS = {"env": 0, "trajectory": 1, "adversary": 2, "comparator": 3}


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown stream {name!r}; expected one of {sorted(STREAMS)}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.PCG64(ss))
