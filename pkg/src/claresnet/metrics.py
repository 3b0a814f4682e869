"""Classification metrics, embedding separation, entropy maps and PR curves.

Class ids are 1-based throughout, matching the label maps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

log = logging.getLogger(__name__)


def confusion(labels, preds, n_classes: int) -> np.ndarray:
    """counts[i, j] = #{true class i+1, predicted j+1}."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ValueError(f"labels and preds differ in length ({labels.shape} vs {preds.shape})")
    for name, arr in (("labels", labels), ("preds", preds)):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise ValueError(f"{name} must lie in 1..{n_classes}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels - 1, preds - 1), 1)
    return cm


def overall_accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def balanced_accuracy(cm, skip_empty: bool = False) -> float:
    """Mean per-class recall. Classes without true samples raise unless ``skip_empty``."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    empty = support == 0
    if empty.any() and not skip_empty:
        raise ValueError(f"classes {list(np.flatnonzero(empty) + 1)} have no true samples")
    recall = np.diag(cm)[~empty] / support[~empty]
    return float(recall.mean())


def cohen_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / total ** 2
    if p_e == 1.0:
        raise ZeroDivisionError("kappa undefined: chance agreement is 1 (single class on both sides)")
    return float((p_o - p_e) / (1 - p_e))


@dataclass
class MccResult:
    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def mcc(cm) -> MccResult:
    """Multiclass Matthews correlation (covariance form).

    A zero denominator gives 0.0 with ``degenerate=True``.
    """
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)  # true counts
    p = cm.sum(axis=0)  # predicted counts
    num = c * s - t @ p
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    if den == 0:
        return MccResult(0.0, True)
    return MccResult(float(np.clip(num / den, -1.0, 1.0)))


def adjusted_rand_index(labels, preds) -> float:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.shape != preds.shape:
        raise ValueError("labels and preds differ in length")
    _, li = np.unique(labels, return_inverse=True)
    _, pi = np.unique(preds, return_inverse=True)
    table = np.zeros((li.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (li, pi), 1)
    n = labels.size
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # both sides a single cluster (or every point alone): identical partitions
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


ari = adjusted_rand_index


def class_centroids(vectors, labels, classes=None):
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    cents = []
    for c in classes:
        rows = vectors[labels == c]
        if len(rows) == 0:
            raise ValueError(f"class {int(c)} has no embeddings")
        cents.append(rows.mean(axis=0))
    return np.stack(cents)


def centroid_distances(vectors, labels, classes=None):
    """Pairwise Euclidean distances of class centroids and their mean over
    unordered distinct pairs."""
    cents = class_centroids(vectors, labels, classes)
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    k = len(cents)
    iu = np.triu_indices(k, 1)
    mean = float(dist[iu].mean()) if k > 1 else 0.0
    return dist, mean


def entropy_map(probs, tol: float = 1e-5) -> np.ndarray:
    """Natural-log entropy of each probability row (last axis); 0 ln 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0).any():
        raise ValueError("negative probability")
    if np.abs(probs.sum(axis=-1) - 1).max(initial=0.0) > tol:
        raise ValueError("probability rows must sum to 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def normalized_entropy(probs) -> np.ndarray:
    probs = np.asarray(probs)
    return entropy_map(probs) / math.log(probs.shape[-1])


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


def pr_curve(scores, positives) -> PRCurve:
    """One-vs-rest precision/recall over a descending-score sweep.

    Tied scores form one threshold. AP is the step sum
    sum_k (R_k - R_{k-1}) P_k without interpolation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("no positive samples; AP undefined")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(positives[order])
    fp = np.cumsum(~positives[order])
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    tp, fp, thr = tp[last], fp[last], s[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(thr, precision, recall, ap)


def average_precision(scores, positives) -> float:
    return pr_curve(scores, positives).ap


def per_class_report(cm, probs=None, labels=None) -> dict:
    cm = np.asarray(cm)
    report = {}
    for i in range(cm.shape[0]):
        tp = cm[i, i]
        support = int(cm[i].sum())
        pred = int(cm[:, i].sum())
        precision = tp / pred if pred else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        ap = None
        if probs is not None and support:
            ap = average_precision(np.asarray(probs)[:, i], np.asarray(labels) == i + 1)
        report[str(i + 1)] = {"precision": float(precision), "recall": float(recall), "f1": float(f1),
                              "ap": ap, "support": support}
    return report


def metrics_report(labels, probs, embeddings=None) -> dict:
    """The JSON metrics document for one evaluated split."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n_classes = probs.shape[1]
    preds = probs.argmax(axis=1) + 1
    cm = confusion(labels, preds, n_classes)
    m = mcc(cm)
    try:
        kappa = cohen_kappa(cm)
    except ZeroDivisionError as exc:
        log.warning("%s", exc)
        kappa = None
    dist = None
    if embeddings is not None:
        _, dist = centroid_distances(embeddings, labels)
    return {
        "oa": overall_accuracy(cm),
        "ba": balanced_accuracy(cm, skip_empty=True),
        "kappa": kappa,
        "mcc": m.value,
        "ari": adjusted_rand_index(labels, preds),
        "avg_centroid_distance": dist,
        "per_class": per_class_report(cm, probs, labels),
    }
