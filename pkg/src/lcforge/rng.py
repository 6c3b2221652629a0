"""Seeded random streams.

All randomness goes through PCG64 generators keyed by a tuple of
non-negative integers, e.g. ``(seed, layer_index)`` for weight init or
``(seed, epoch, batch_index)`` for augmentation. ``SeedSequence`` hashes the
key, so every stream is reproducible in isolation and independent of the
order in which streams are requested.
"""

from __future__ import annotations

import numpy as np

# domain tags keep streams for different purposes disjoint
INIT = 0
SHUFFLE = 1
AUGMENT = 2
DIAGNOSTICS = 3


def stream(*key: int) -> np.random.Generator:
    if any(int(k) < 0 for k in key):
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


class LayerStreams:
    """Hands out one generator per layer, in construction order."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.index = 0

    def next(self) -> np.random.Generator:
        rng = stream(INIT, self.seed, self.index)
        self.index += 1
        return rng
