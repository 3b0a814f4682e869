"""Synthetic hyperspectral scenes with a known generative recipe.

The scene is cut into ``tile x tile`` blocks; blocks are dealt to classes in
a seeded random order (round robin, so classes get near-equal area). Each
class owns a smooth spectral signature: a baseline of 1 plus three Gaussian
bumps over normalized band position with centres U(0, 1), widths
U(0.08, 0.25) and amplitudes U(0.5, 1.5). A pixel's spectrum is

    1 + snr * (signature[class] - mean signature) + N(0, noise_std^2)

so ``snr=0`` makes every class draw from the same distribution. Finally a
``unlabeled_frac`` share of pixels is set to label 0.
"""

from __future__ import annotations

import numpy as np

from . import rng as rngs


def class_signatures(n_classes: int, n_bands: int, gen: np.random.Generator) -> np.ndarray:
    pos = np.linspace(0.0, 1.0, n_bands)
    sigs = np.ones((n_classes, n_bands))
    for c in range(n_classes):
        centres = gen.uniform(0.0, 1.0, 3)
        widths = gen.uniform(0.08, 0.25, 3)
        amps = gen.uniform(0.5, 1.5, 3)
        for mu, w, a in zip(centres, widths, amps):
            sigs[c] += a * np.exp(-0.5 * ((pos - mu) / w) ** 2)
    return sigs


def region_map(size: int, n_classes: int, tile: int, gen: np.random.Generator) -> np.ndarray:
    n_tiles = -(-size // tile)
    owners = np.arange(n_tiles * n_tiles) % n_classes + 1
    owners = owners[gen.permutation(owners.size)].reshape(n_tiles, n_tiles)
    full = np.kron(owners, np.ones((tile, tile), dtype=np.int64))
    return full[:size, :size]


def make_scene(n_classes: int = 4, size: int = 48, n_bands: int = 20, seed: int = 0,
               snr: float = 1.0, noise_std: float = 0.3, tile: int = 12,
               unlabeled_frac: float = 0.13):
    """Return ``(cube (size, size, n_bands) float32, labels (size, size) int32)``."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    gen = rngs.stream(seed, rngs.SYNTH)
    sigs = class_signatures(n_classes, n_bands, gen)
    regions = region_map(size, n_classes, tile, gen)
    centred = sigs - sigs.mean(axis=0)
    cube = 1.0 + snr * centred[regions - 1] + gen.normal(0.0, noise_std, (size, size, n_bands))
    labels = regions.copy()
    labels[gen.random((size, size)) < unlabeled_frac] = 0
    return cube.astype(np.float32), labels.astype(np.int32)
