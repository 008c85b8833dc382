"""Named random substreams, all derived from one master seed.

Every stochastic component (dataset, init, stage1, stage2, ransac, ...)
pulls its generator through ``substream`` so individual sources of
randomness can be isolated and replayed.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + list(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy))
