"""Cube preprocessing, stratified splitting, patch extraction and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

STD_CLAMP = 1e-8
SPLIT_RATIOS = (0.72, 0.08, 0.20)


class SplitError(ValueError):
    pass


def _check_cube(cube) -> np.ndarray:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"expected a (rows, cols, bands) cube, got shape {cube.shape}")
    if cube.size == 0:
        raise ValueError("empty cube")
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains non-finite values")
    return cube


def standardize(cube):
    """Per-band z-score over all pixels.

    Returns ``(standardized, means, stds)``; stds are clamped at 1e-8 so a
    constant band maps to zeros.
    """
    cube = _check_cube(cube).astype(np.float64)
    flat = cube.reshape(-1, cube.shape[-1])
    means = flat.mean(axis=0)
    stds = np.maximum(flat.std(axis=0), STD_CLAMP)
    return (cube - means) / stds, means, stds


@dataclass
class PcaModel:
    band_means: np.ndarray
    band_stds: np.ndarray
    components: np.ndarray  # (bands, n_components), orthonormal columns
    explained_variance: np.ndarray

    @property
    def n_bands(self) -> int:
        return self.components.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PcaModel":
        return cls(**{k: np.asarray(doc[k], dtype=np.float64) for k in
                      ("band_means", "band_stds", "components", "explained_variance")})


def _pca_basis(flat: np.ndarray, n_components: int):
    n_bands = flat.shape[1]
    if not 1 <= n_components <= n_bands:
        raise ValueError(f"n_components={n_components} must be in [1, {n_bands}]")
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / flat.shape[0]
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"covariance eigensolve failed: {exc}") from exc
    order = np.argsort(evals)[::-1][:n_components]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude entry of each column positive
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evecs * signs, evals


def fit_pca(cube, n_components: int, mask=None) -> PcaModel:
    """Standardize bands and fit PCA on every pixel (or only ``mask`` pixels)."""
    cube = _check_cube(cube)
    if n_components > cube.shape[-1]:
        raise ValueError(f"n_components={n_components} exceeds band count {cube.shape[-1]}")
    flat = cube.reshape(-1, cube.shape[-1]).astype(np.float64)
    if mask is not None:
        flat = flat[np.asarray(mask, dtype=bool).reshape(-1)]
    means = flat.mean(axis=0)
    stds = np.maximum(flat.std(axis=0), STD_CLAMP)
    components, evals = _pca_basis((flat - means) / stds, n_components)
    return PcaModel(means, stds, components, evals)


def apply_pca(cube, model: PcaModel) -> np.ndarray:
    cube = _check_cube(cube)
    if cube.shape[-1] != model.n_bands:
        raise ValueError(f"cube has {cube.shape[-1]} bands, PCA model expects {model.n_bands}")
    z = (cube.astype(np.float64) - model.band_means) / model.band_stds
    return z @ model.components


class SpectralPCA(TransformerMixin, BaseEstimator):
    """Band standardization, PCA and optional re-standardization of the
    component planes, as one cube transformer.

    Parameters
    ----------
    n_components : int, default=30
    fit_on : {"scene", "labeled"}, default="scene"
        ``"scene"`` fits on every pixel; ``"labeled"`` only on pixels where the
        ``y`` label map passed to :meth:`fit` is nonzero.
    rescale : bool, default=True
        z-score each component plane after projection.
    """

    def __init__(self, n_components=30, fit_on="scene", rescale=True):
        self.n_components = n_components
        self.fit_on = fit_on
        self.rescale = rescale

    def fit(self, X, y=None):
        if self.fit_on not in ("scene", "labeled"):
            raise ValueError(f"fit_on must be 'scene' or 'labeled', got {self.fit_on!r}")
        mask = None
        if self.fit_on == "labeled":
            if y is None:
                raise ValueError("fit_on='labeled' needs the label map as y")
            mask = np.asarray(y) > 0
        self.model_ = fit_pca(X, self.n_components, mask=mask)
        projected = apply_pca(X, self.model_)
        flat = projected.reshape(-1, projected.shape[-1])
        if mask is not None:
            flat = flat[mask.reshape(-1)]
        if self.rescale:
            self.out_means_ = flat.mean(axis=0)
            self.out_stds_ = np.maximum(flat.std(axis=0), STD_CLAMP)
        else:
            self.out_means_ = np.zeros(self.n_components)
            self.out_stds_ = np.ones(self.n_components)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        out = (apply_pca(X, self.model_) - self.out_means_) / self.out_stds_
        return out.astype(np.float32)

    def to_dict(self) -> dict:
        check_is_fitted(self, "model_")
        return {
            "params": self.get_params(),
            "pca": self.model_.to_dict(),
            "out_means": self.out_means_.tolist(),
            "out_stds": self.out_stds_.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SpectralPCA":
        obj = cls(**doc["params"])
        obj.model_ = PcaModel.from_dict(doc["pca"])
        obj.out_means_ = np.asarray(doc["out_means"])
        obj.out_stds_ = np.asarray(doc["out_stds"])
        return obj


# --------------------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    seed: int
    train: np.ndarray  # (n, 2) int (row, col)
    val: np.ndarray
    test: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


def split_counts(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes: cut at rounded cumulative
    boundaries, then move samples out of train until each part has one."""
    cut1 = int(np.floor(n * ratios[0] + 0.5))
    cut2 = int(np.floor(n * (ratios[0] + ratios[1]) + 0.5))
    counts = [cut1, cut2 - cut1, n - cut2]
    for k in (1, 2):
        if counts[k] == 0:
            counts[k] = 1
            counts[0] -= 1
    return tuple(counts)


def stratified_split(labels, ratios=SPLIT_RATIOS, seed: int = 0) -> SplitSpec:
    from . import rng as rngs

    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    gen = rngs.stream(seed, rngs.SPLIT)
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for cls in np.unique(labels[labels > 0]):
        coords = np.argwhere(labels == cls)  # row-major order
        if len(coords) < 3:
            raise SplitError(f"class {int(cls)} has {len(coords)} labeled pixels; at least 3 needed")
        coords = coords[gen.permutation(len(coords))]
        n_tr, n_va, _ = split_counts(len(coords), ratios)
        parts["train"].append(coords[:n_tr])
        parts["val"].append(coords[n_tr:n_tr + n_va])
        parts["test"].append(coords[n_tr + n_va:])
    stack = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros((0, 2), np.int64)
    return SplitSpec(seed=int(seed), **{k: stack(v) for k, v in parts.items()})


# --------------------------------------------------------------------------- patches


def reflect_index(idx, n: int) -> np.ndarray:
    """Symmetric reflection without edge repeat: -1 -> 1, n -> n - 2."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _check_patch_size(patch_size: int, rows: int, cols: int) -> None:
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch size must be odd, got {patch_size}")
    if patch_size // 2 > min(rows, cols):
        raise ValueError(f"patch size {patch_size} too large for a {rows}x{cols} scene")


def extract_patch(cube, row: int, col: int, patch_size: int = 11) -> np.ndarray:
    """(bands, P, P) window centred on (row, col) with reflected borders."""
    return extract_patches(cube, np.array([[row, col]]), patch_size)[0]


def extract_patches(cube, coords, patch_size: int = 11) -> np.ndarray:
    cube = np.asarray(cube)
    rows, cols, _ = cube.shape
    _check_patch_size(patch_size, rows, cols)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= rows or coords[:, 1].max() >= cols):
        raise IndexError("patch centre outside the cube")
    half = patch_size // 2
    offsets = np.arange(-half, half + 1)
    ri = reflect_index(coords[:, :1] + offsets, rows)
    ci = reflect_index(coords[:, 1:] + offsets, cols)
    patches = cube[ri[:, :, None], ci[:, None, :]]  # (n, P, P, bands)
    return np.ascontiguousarray(patches.transpose(0, 3, 1, 2))


# --------------------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    noise_std: float = 0.05
    noise_prob: float = 0.5
    rot_prob: float = 0.5
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("noise_prob", "rot_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def augment(patch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random noise, 90-degree rotation and flip of one (bands, P, P) patch.

    Draw order per call: noise coin [, noise], rotation coin [, angle],
    flip coin [, axis]. Each stage is independent.
    """
    out = patch
    if rng.random() < cfg.noise_prob:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape).astype(out.dtype)
    if rng.random() < cfg.rot_prob:
        out = np.rot90(out, k=int(rng.integers(1, 4)), axes=(1, 2))
    if rng.random() < cfg.flip_prob:
        out = np.flip(out, axis=2 if rng.integers(2) == 0 else 1)
    return np.ascontiguousarray(out)


def augment_batch(patches: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(p, cfg, rng) for p in patches])


def batch_iter(n: int, batch_size: int, shuffle: bool = False,
               rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches covering ``range(n)`` once; the last batch may be short."""
    if n <= 0:
        raise ValueError("cannot batch an empty split")
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class PatchSet:
    """Patches of one split with their 1-based labels and centre pixels."""

    patches: np.ndarray  # (n, T, P, P) float32
    labels: np.ndarray  # (n,) int
    origins: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    def __len__(self) -> int:
        return len(self.labels)


def build_patchset(cube, label_map, coords, patch_size: int = 11) -> PatchSet:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    patches = extract_patches(cube, coords, patch_size).astype(np.float32)
    labels = np.asarray(label_map)[coords[:, 0], coords[:, 1]].astype(np.int64)
    return PatchSet(patches, labels, coords)
