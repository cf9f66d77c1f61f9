"""Metric-learning losses on top of the softmax term.

``D`` is the squared Euclidean distance throughout.

* triplet-center loss: ``max(D(f, c_y) + m - min_{j != y} D(f, c_j), 0)``
* compact triplet-center loss: ``max(m * D(x, c_y) - D(x, c_neg), 0)`` with
  ``c_neg`` drawn uniformly from the other classes.

Centers are never touched by the optimizer.  They move by the closed-form
rule in :func:`update_centers` (or :func:`update_centers_tcl`), which drops
the factor 2 of the squared-distance derivative into the rate ``eta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

CTCL_MARGIN = 4.5
TCL_MARGIN = 5.0


@dataclass
class CenterBank:
    centers: np.ndarray
    margin: float = CTCL_MARGIN
    eta: float = 0.5

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ContractError("centers must be an (n_classes, d) matrix")
        if not self.margin >= 0:
            raise ContractError("margin must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"center learning rate must lie in [0, 1], got {self.eta}")

    @classmethod
    def initialize(cls, n_classes: int, dim: int, margin: float = CTCL_MARGIN, eta: float = 0.5,
                   seed: int = 0, std: float = 0.01) -> "CenterBank":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(n_classes, dim)), margin, eta)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy(), self.margin, self.eta)


@dataclass
class JointLossConfig:
    lam: float = 0.024
    kind: str = "ctcl"
    negatives: str = "random"
    reduction: str = "mean"

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.kind not in ("ctcl", "tcl"):
            raise ContractError(f"unknown metric loss {self.kind!r}")
        if self.negatives not in ("random", "nearest"):
            raise ContractError(f"unknown negative selection {self.negatives!r}")
        if self.reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossReport:
    total: float
    ce: float
    metric: float
    d_pos: np.ndarray
    d_neg: np.ndarray
    active: np.ndarray
    negatives: np.ndarray
    kind: str = "ctcl"
    per_sample: np.ndarray | None = None
    loss: Tensor | None = field(default=None, repr=False)
    centers: Tensor | None = field(default=None, repr=False)

    def record(self, step: int) -> dict:
        return {
            "step": int(step),
            "total": float(self.total),
            "ce": float(self.ce),
            "metric": float(self.metric),
            "mean_d_pos": float(np.mean(self.d_pos)),
            "mean_d_neg": float(np.mean(self.d_neg)),
            "active_fraction": float(np.mean(self.active)),
        }

    def to_jsonl(self, step: int) -> str:
        return json.dumps(self.record(step), sort_keys=True)


def _check_inputs(features, labels, bank: CenterBank):
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2 or x.shape[1] != bank.dim:
        raise ContractError(f"features must be (M, {bank.dim}), got {x.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0] or y.shape[0] < 1:
        raise ContractError("need one label per feature row and at least one row")
    if bank.n_classes < 2:
        raise ContractError("a center bank needs at least two classes to supply a negative")
    if y.min() < 0 or y.max() >= bank.n_classes:
        raise IndexError(f"label out of range for {bank.n_classes} classes")
    return x, y


def squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(M, K) matrix of squared distances, computed by explicit differences."""
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def nearest_negatives(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = squared_distances(x, centers)
    d[np.arange(len(labels)), labels] = np.inf
    return d.argmin(axis=1)


def draw_negatives(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over the classes other than each sample's own."""
    labels = np.asarray(labels, dtype=np.int64)
    j = rng.integers(0, n_classes - 1, size=labels.shape)
    return j + (j >= labels)


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = T.sub(a, b)
    return T.tsum(T.mul(d, d), axis=1)


def _metric_graph(x: Tensor, y, neg, bank: CenterBank, track_centers: bool):
    c = Tensor(bank.centers, requires_grad=track_centers)
    d_pos = _sq_dist(x, T.take_rows(c, y))
    d_neg = _sq_dist(x, T.take_rows(c, neg))
    return c, d_pos, d_neg


def _report(kind, per_sample: Tensor, d_pos, d_neg, neg, c, track_centers) -> LossReport:
    loss = T.tsum(per_sample)
    value = float(loss.data)
    rep = LossReport(
        total=value, ce=0.0, metric=value,
        d_pos=d_pos.data.copy(), d_neg=d_neg.data.copy(),
        active=per_sample.data > 0, negatives=np.asarray(neg, dtype=np.int64),
        kind=kind, per_sample=per_sample.data.copy(), loss=loss,
        centers=c if track_centers else None,
    )
    return rep


def tcl_loss(features, labels, bank: CenterBank, track_centers: bool = False) -> LossReport:
    """Triplet-center loss against the nearest other-class center, summed
    over the batch."""
    x, y = _check_inputs(features, labels, bank)
    neg = nearest_negatives(x.data, y, bank.centers)
    c, d_pos, d_neg = _metric_graph(x, y, neg, bank, track_centers)
    per_sample = T.relu(T.sub(T.add(d_pos, bank.margin), d_neg))
    return _report("tcl", per_sample, d_pos, d_neg, neg, c, track_centers)


def ctcl_loss(features, labels, bank: CenterBank, rng: np.random.Generator | None = None,
              negatives=None, track_centers: bool = False) -> LossReport:
    """Compact triplet-center loss with one random negative per sample.

    Pass ``negatives`` to replay a previous draw instead of sampling.
    """
    x, y = _check_inputs(features, labels, bank)
    if negatives is None:
        if rng is None:
            raise ContractError("ctcl_loss needs an rng (or explicit negatives)")
        neg = draw_negatives(y, bank.n_classes, rng)
    else:
        neg = np.asarray(negatives, dtype=np.int64).reshape(-1)
        if neg.shape != y.shape:
            raise ContractError("one negative per sample is required")
        if neg.min() < 0 or neg.max() >= bank.n_classes:
            raise IndexError("negative class out of range")
        if np.any(neg == y):
            raise ContractError("a negative center must belong to a different class")
    c, d_pos, d_neg = _metric_graph(x, y, neg, bank, track_centers)
    per_sample = T.relu(T.sub(T.scale(d_pos, bank.margin), d_neg))
    return _report("ctcl", per_sample, d_pos, d_neg, neg, c, track_centers)


def ctcl_feature_grad(x, c_pos, c_neg, m: float, eta: float) -> np.ndarray:
    """Closed-form feature update ``eta * ((m - 1) x - m c_pos + c_neg)``.

    Equals ``eta / 2`` times the true gradient of the active hinge term.
    """
    x, c_pos, c_neg = (np.asarray(v, dtype=np.float64) for v in (x, c_pos, c_neg))
    d_pos = np.sum((x - c_pos) ** 2)
    d_neg = np.sum((x - c_neg) ** 2)
    if not m * d_pos - d_neg > 0:
        raise ContractError("hinge is inactive for this sample; its gradient is zero")
    return eta * ((m - 1.0) * x - m * c_pos + c_neg)


def _center_deltas(bank, x, y, neg, active, pos_weight):
    delta = np.zeros_like(bank.centers)
    c = bank.centers
    a = active.astype(np.float64)[:, None]
    np.add.at(delta, y, bank.eta * pos_weight * a * (x - c[y]))
    np.add.at(delta, neg, bank.eta * a * (c[neg] - x))
    return delta


def update_centers(bank: CenterBank, features, labels, negatives) -> CenterBank:
    """Move centers of the compact loss in place and return the bank.

    Only hinge-active samples (``m D_pos - D_neg > 0`` at the current
    centers) contribute.  Every delta is computed from the pre-update
    centers.
    """
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1)
    for idx in (y, neg):
        if idx.size and (idx.min() < 0 or idx.max() >= bank.n_classes):
            raise IndexError("class index out of range for the center bank")
    c = bank.centers
    d_pos = np.sum((x - c[y]) ** 2, axis=1)
    d_neg = np.sum((x - c[neg]) ** 2, axis=1)
    active = bank.margin * d_pos - d_neg > 0
    bank.centers = c + _center_deltas(bank, x, y, neg, active, bank.margin)
    return bank


def update_centers_tcl(bank: CenterBank, features, labels, negatives=None) -> CenterBank:
    """Center rule for the plain triplet-center loss (unit weight on the
    positive term); negatives default to the nearest other centers."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    c = bank.centers
    neg = nearest_negatives(x, y, c) if negatives is None else np.asarray(negatives, dtype=np.int64)
    d_pos = np.sum((x - c[y]) ** 2, axis=1)
    d_neg = np.sum((x - c[neg]) ** 2, axis=1)
    active = d_pos + bank.margin - d_neg > 0
    bank.centers = c + _center_deltas(bank, x, y, neg, active, 1.0)
    return bank


def metric_loss(features, labels, bank: CenterBank, kind: str = "ctcl",
                rng: np.random.Generator | None = None, negatives: str = "random") -> LossReport:
    if kind == "tcl":
        return tcl_loss(features, labels, bank)
    if negatives == "nearest":
        x, y = _check_inputs(features, labels, bank)
        return ctcl_loss(x, y, bank, negatives=nearest_negatives(x.data, y, bank.centers))
    return ctcl_loss(features, labels, bank, rng)


def apply_center_update(bank: CenterBank, features, labels, report: LossReport) -> CenterBank:
    if report.kind == "tcl":
        return update_centers_tcl(bank, features, labels, report.negatives)
    return update_centers(bank, features, labels, report.negatives)


def joint_loss(output, labels, bank: CenterBank, cfg: JointLossConfig,
               rng: np.random.Generator | None = None) -> LossReport:
    """Softmax cross-entropy plus ``lam`` times the metric loss on the
    embedding branch.  With ``reduction="mean"`` (default) both terms are
    batch averages; ``"sum"`` keeps the metric term as a batch sum.  The
    reported ``metric`` is the term as it enters the total, so
    ``total == ce + lam * metric`` either way.

    The metric term is always evaluated for reporting; it enters the graph
    only when ``lam > 0``.
    """
    ce = T.softmax_cross_entropy(output.logits, labels)
    emb = output.embedding if output.embedding.ndim == 2 else T.reshape(output.embedding, (1, -1))
    metric = metric_loss(emb, labels, bank, cfg.kind, rng, cfg.negatives)
    ce_value = float(ce.data)
    term = metric.loss
    if cfg.reduction == "mean":
        term = T.scale(term, 1.0 / emb.shape[0])
        metric.metric = float(term.data)
    loss = T.add(ce, T.scale(term, cfg.lam)) if cfg.lam > 0 else ce
    metric.total = ce_value + cfg.lam * metric.metric
    metric.ce = ce_value
    metric.loss = loss
    return metric
