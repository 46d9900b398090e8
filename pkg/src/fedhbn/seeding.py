"""Master-seed fan-out.

Every randomness source draws from ``SeedSequence([master, stream, *keys])``
so that, e.g., participant sampling in round 7 is reproducible without
replaying anything else. The synthetic dataset uses the "data" stream
keyed by its own ``data_seed`` rather than the master seed, so changing
the master seed re-partitions and re-initialises but keeps the data.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 0, "partition": 1, "init": 2, "shuffle": 3, "participants": 4}


def derive_rng(master: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master, STREAMS[stream], *keys]))


def derive_seed(master: int, stream: str, *keys: int) -> int:
    return int(np.random.SeedSequence([master, STREAMS[stream], *keys]).generate_state(1)[0])
