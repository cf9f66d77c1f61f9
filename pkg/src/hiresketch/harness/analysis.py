"""Distance tables and low-dimensional projections of learned features."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..losses import squared_distances

log = logging.getLogger(__name__)


def class_means(features: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    means = np.zeros((n_classes, features.shape[1]))
    for k in range(n_classes):
        sel = labels == k
        if sel.any():
            means[k] = features[sel].mean(axis=0)
    return means


def pos_neg_distances(features, labels, centers, negatives="nearest"):
    """Per-sample squared distance to the own center and to a negative
    center (``"nearest"`` other center, ``"mean"`` over all other centers,
    or an explicit index array)."""
    labels = np.asarray(labels, dtype=np.int64)
    d = squared_distances(np.asarray(features, dtype=np.float64), centers)
    rows = np.arange(len(labels))
    d_pos = d[rows, labels]
    if isinstance(negatives, str):
        masked = d.copy()
        masked[rows, labels] = np.nan
        if negatives == "nearest":
            d_neg = np.nanmin(masked, axis=1)
        elif negatives == "mean":
            d_neg = np.nanmean(masked, axis=1)
        else:
            raise ContractError(f"unknown negative rule {negatives!r}")
    else:
        d_neg = d[rows, np.asarray(negatives, dtype=np.int64)]
    return d_pos, d_neg


def distance_ratio(features, labels, centers, negatives="nearest") -> float:
    """mean(D_pos) / mean(D_neg)."""
    d_pos, d_neg = pos_neg_distances(features, labels, centers, negatives)
    return float(d_pos.mean() / d_neg.mean())


@dataclass
class DistanceReport:
    rows: list[tuple[int, int, float, float]]
    mean_d_pos: float
    std_d_pos: float
    mean_d_neg: float
    std_d_neg: float

    @property
    def ratio(self) -> float:
        return self.mean_d_pos / self.mean_d_neg

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "label", "d_pos", "d_neg"])
        for r in self.rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3])])
        return buf.getvalue()


def distance_report(features, labels, centers, n_show: int = 20, negatives="nearest") -> DistanceReport:
    """Per-sample D_pos/D_neg for the first sample of ``n_show`` distinct
    classes; summary statistics cover every sample."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    d_pos, d_neg = pos_neg_distances(features, labels, centers, negatives)
    classes = sorted(set(labels.tolist()))
    if n_show > len(classes):
        log.warning("n_show=%d exceeds %d available classes; clipping", n_show, len(classes))
        n_show = len(classes)
    rows = []
    for k in classes[:n_show]:
        i = int(np.flatnonzero(labels == k)[0])
        rows.append((i, k, float(d_pos[i]), float(d_neg[i])))
    return DistanceReport(rows, float(d_pos.mean()), float(d_pos.std()),
                          float(d_neg.mean()), float(d_neg.std()))


def pca_project(features, n_components: int = 2) -> np.ndarray:
    """Coordinates on the top principal axes of mean-centred data.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError("pca_project needs an (N, d) array with N >= 3")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:n_components]
    if axes.shape[0] < n_components:
        axes = np.vstack([axes, np.zeros((n_components - axes.shape[0], x.shape[1]))])
    pivot = np.argmax(np.abs(axes), axis=1)
    signs = np.sign(axes[np.arange(n_components), pivot])
    signs[signs == 0] = 1.0
    return xc @ (axes * signs[:, None]).T
