"""Seeded random streams.

Every stochastic step draws from its own PCG64 stream derived from the run
seed with ``numpy.random.SeedSequence(seed, spawn_key=(stream,))``, so the
split does not shift when, say, augmentation draws more numbers.
"""

from __future__ import annotations

import numpy as np

SPLIT = 0
SHUFFLE = 1
AUGMENT = 2
SYNTH = 3
TORCH = 4


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(which,))))


def torch_seed(seed: int) -> int:
    """Seed for torch's generator (weight init, dropout masks)."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(TORCH,)).generate_state(1, np.uint32)[0])
