"""Deterministic random streams.

Every stochastic choice in this package draws from numpy's Philox
counter-based bit generator, keyed by a ``(seed, stream)`` pair. Philox
output is identical across platforms, so a seed fully determines datasets,
initial parameters, and batch schedules. Platform-default generators are
deliberately not used anywhere.

Stream ids keep independent consumers from sharing state:

* ``STREAM_DATASET`` - synthetic dataset generation
* ``STREAM_INIT`` - model parameter initialization
* ``STREAM_BATCHES`` - per-step mini-batch sampling
* ``STREAM_EVAL_BATCHES`` - held-out evaluation batches for sharpness
"""

from __future__ import annotations

import numpy as np

STREAM_DATASET = 0
STREAM_INIT = 1
STREAM_BATCHES = 2
STREAM_EVAL_BATCHES = 3


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Return the Philox generator for a ``(seed, stream)`` pair."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
