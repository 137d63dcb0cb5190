"""Counter-based random streams.

Every stream is a Philox generator keyed by (seed, stream_id), so a stream
belongs to a logical unit of work (a trajectory, a training run) rather than
to whichever worker happens to execute it. Results are therefore independent
of worker count and scheduling.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream_id & 0xFFFFFFFFFFFFFFFF)])
    return np.random.Generator(np.random.Philox(key=key))
