import math

import numpy as np
import pytest
import torch

from claresnet.maps import (
    PALETTE,
    colorize,
    pgm16_bytes,
    ppm_bytes,
    predict_scene,
    read_pnm,
    uncertainty_image,
)
from claresnet.metrics import centroid_distances
from claresnet.synth import make_scene


def test_synth_deterministic_per_seed():
    a = make_scene(4, 32, 20, seed=3)
    b = make_scene(4, 32, 20, seed=3)
    c = make_scene(4, 32, 20, seed=4)
    assert a[0].shape == (32, 32, 20) and a[1].shape == (32, 32)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_synth_defaults_class_balance():
    _, labels = make_scene()
    counts = np.bincount(labels.ravel(), minlength=5)[1:]
    assert np.all((counts > 400) & (counts < 600))


def test_synth_default_means_separated():
    cube, labels = make_scene()
    mask = labels > 0
    _, mean_dist = centroid_distances(cube[mask], labels[mask])
    dist, _ = centroid_distances(cube[mask], labels[mask])
    noise = 0.3 * math.sqrt(cube.shape[-1])  # typical per-pixel noise norm
    off = dist[np.triu_indices(4, 1)]
    assert off.min() > noise


def test_synth_zero_snr_identical_classes():
    cube, labels = make_scene(snr=0.0)
    mask = labels > 0
    dist, _ = centroid_distances(cube[mask], labels[mask])
    # only sampling noise of the means remains: ~0.3*sqrt(2*20/500)
    assert dist.max() < 0.2


def test_synth_rejects_single_class():
    with pytest.raises(ValueError):
        make_scene(n_classes=1)


def test_palette_is_fixed_and_distinct():
    assert PALETTE.shape == (16, 3)
    assert len({tuple(c) for c in PALETTE}) == 16
    assert tuple(PALETTE[0]) == (230, 25, 75)


def test_single_class_map_is_single_color():
    rgb = colorize(np.full((5, 7), 3))
    magic, maxval, back = read_pnm(ppm_bytes(rgb))
    assert magic == "P6" and maxval == 255 and back.shape == (5, 7, 3)
    assert np.all(back == PALETTE[2])


def test_background_black():
    assert np.all(colorize(np.zeros((2, 2), int)) == 0)


def test_uniform_probs_white_pgm():
    img = uncertainty_image(np.full((4, 6, 5), 0.2))
    magic, maxval, back = read_pnm(pgm16_bytes(img))
    assert magic == "P5" and maxval == 65535 and back.shape == (4, 6)
    assert np.all(back == 65535)
    onehot = uncertainty_image(np.eye(3)[np.zeros((2, 2), int)])
    assert np.all(onehot == 0)


def test_pgm_big_endian():
    buf = pgm16_bytes(np.array([[258]], dtype=np.uint16))
    assert buf.endswith(b"\x01\x02")


class ConstantModel(torch.nn.Module):
    def __init__(self, n_classes):
        super().__init__()
        self.n = n_classes
        self.head = torch.nn.Identity()

    def embed(self, x):
        return torch.zeros(len(x), self.n)


def test_predict_scene_covers_every_pixel():
    cube = np.random.default_rng(0).normal(size=(5, 9, 3)).astype(np.float32)
    probs = predict_scene(ConstantModel(4), cube, patch_size=7, batch_size=8, chunk=10)
    assert probs.shape == (5, 9, 4)
    np.testing.assert_allclose(probs, 0.25)
