"""Full-scene prediction and PPM/PGM rendering."""

from __future__ import annotations

import re

import numpy as np

from .datapipe import extract_patches
from .metrics import normalized_entropy
from .training import predict_logits

# Class k (1-based) is drawn with PALETTE[k - 1]; classes beyond 16 wrap around.
# Unlabeled / background pixels are black.
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)
BACKGROUND = np.array((0, 0, 0), dtype=np.uint8)


def predict_scene(model, cube, patch_size: int = 11, batch_size: int = 32, chunk: int = 2048):
    """Class probabilities for every pixel: (rows, cols, C)."""
    import torch

    rows, cols, _ = cube.shape
    coords = np.argwhere(np.ones((rows, cols), dtype=bool))
    probs = []
    for start in range(0, len(coords), chunk):
        patches = extract_patches(cube, coords[start:start + chunk], patch_size)
        logits = predict_logits(model, patches.astype(np.float32), batch_size)
        probs.append(torch.softmax(logits.double(), dim=-1).numpy())
    probs = np.concatenate(probs)
    return probs.reshape(rows, cols, -1)


def colorize(class_map) -> np.ndarray:
    class_map = np.asarray(class_map)
    rgb = np.empty(class_map.shape + (3,), dtype=np.uint8)
    rgb[:] = BACKGROUND
    fg = class_map > 0
    rgb[fg] = PALETTE[(class_map[fg] - 1) % len(PALETTE)]
    return rgb


def ppm_bytes(rgb) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def pgm16_bytes(gray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint16)
    h, w = gray.shape
    return f"P5\n{w} {h}\n65535\n".encode() + gray.astype(">u2").tobytes()


def uncertainty_image(probs) -> np.ndarray:
    """H / ln C scaled to 0..65535 (white = maximal entropy)."""
    h = np.clip(normalized_entropy(probs), 0.0, 1.0)
    return np.floor(h * 65535 + 0.5).astype(np.uint16)


def read_pnm(buf: bytes):
    """Minimal P5/P6 reader for the files written here: (magic, maxval, array)."""
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError("not a binary PGM/PPM file")
    magic = m.group(1).decode()
    w, h, maxval = (int(g) for g in m.group(2, 3, 4))
    data = buf[m.end():]
    if magic == "P6":
        return magic, maxval, np.frombuffer(data, np.uint8).reshape(h, w, 3)
    dtype = ">u2" if maxval > 255 else np.uint8
    return magic, maxval, np.frombuffer(data, dtype).reshape(h, w)
