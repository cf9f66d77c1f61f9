"""Loss dynamics on synthetic feature clouds.

A linear map ``z = x @ W`` is trained with Adam, while the class centers
move only through the closed-form center rule.  The objective is
``CE + lam * metric`` (batch means) with a linear softmax head on ``z``:

* ``head="fixed"`` (default): a random head that is not trained, so the
  softmax term can only sharpen its logits by growing ``z``.  This is the
  large-feature regime of a deep network, where an additive margin becomes
  negligible and a multiplicative one does not.
* ``head="trained"``: the head is optimised too and absorbs most of the
  scale.
* ``head="none"``: metric loss only, so distances are set by the margin.
  Without a softmax term the compact loss is minimised by shrinking ``W``
  towards zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..data import FeatureCloud, generate_feature_cloud
from ..errors import ContractError
from ..losses import CTCL_MARGIN, TCL_MARGIN, CenterBank, apply_center_update, metric_loss
from ..tensor import Tensor
from .analysis import class_means, pos_neg_distances
from .schedule import Adam


@dataclass
class CenterSimConfig:
    loss: str = "ctcl"
    margin: float | None = None
    eta: float = 0.05
    lr: float = 0.01
    steps: int = 600
    batch_size: int = 100
    seed: int = 0
    negatives: str = "random"
    init: str = "identity"
    lam: float = 1.0
    head: str = "fixed"

    def __post_init__(self):
        if self.loss not in ("ctcl", "tcl"):
            raise ContractError(f"unknown metric loss {self.loss!r}")
        if self.init not in ("identity", "random"):
            raise ContractError(f"unknown embedding init {self.init!r}")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("steps, batch_size and lr must be positive")
        if self.head not in ("trained", "fixed", "none"):
            raise ContractError(f"unknown softmax head mode {self.head!r}")
        if self.lam <= 0:
            raise ContractError("the metric weight must be positive")
        if self.margin is None:
            self.margin = TCL_MARGIN if self.loss == "tcl" else CTCL_MARGIN


@dataclass
class CenterSimResult:
    config: dict
    history: list[dict] = field(default_factory=list)
    mean_d_pos: float = float("nan")
    mean_d_neg: float = float("nan")
    weights: np.ndarray | None = field(default=None, repr=False)
    centers: np.ndarray | None = field(default=None, repr=False)

    @property
    def ratio(self) -> float:
        return self.mean_d_pos / self.mean_d_neg

    def summary(self) -> dict:
        return {"loss": self.config["loss"], "margin": self.config["margin"],
                "mean_d_pos": self.mean_d_pos, "mean_d_neg": self.mean_d_neg, "ratio": self.ratio}

    def write_history(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def contrast_cloud(seed: int = 0) -> FeatureCloud:
    """20 classes in 32 dimensions whose means span 8 of them; the other
    24 coordinates are nuisance noise."""
    return generate_feature_cloud(20, 32, spread=1.0, seed=seed, per_class=50,
                                  separation=6.0, rank=8)


def embed(cloud: FeatureCloud, weights: np.ndarray) -> np.ndarray:
    return cloud.points @ weights


def simulate(cloud: FeatureCloud, cfg: CenterSimConfig) -> CenterSimResult:
    """Train the embedding on ``cloud`` and report final distances.

    Centers start at the class means of the initial embedding.  Final
    distances use every sample, the bank centers and the nearest other
    center as the negative, so TCL and CTCL runs are measured alike.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cloud.dim
    if cfg.init == "identity":
        w0 = np.eye(d)
    else:
        w0 = rng.uniform(-1.0, 1.0, size=(d, d)) * np.sqrt(3.0 / d)
    w = Tensor(w0, requires_grad=True, name="embedding")
    start = cloud.points @ w0
    bank = CenterBank(class_means(start, cloud.labels, cloud.n_classes), cfg.margin, cfg.eta)
    params = [w]
    if cfg.head != "none":
        head = Tensor(rng.uniform(-1.0, 1.0, size=(d, cloud.n_classes)) * np.sqrt(3.0 / d),
                      requires_grad=cfg.head == "trained", name="head")
        if cfg.head == "trained":
            params.append(head)
    opt = Adam(params, cfg.lr)
    result = CenterSimResult(config=asdict(cfg))
    n = len(cloud.labels)
    order = rng.permutation(n)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = Tensor(cloud.points[idx])
        y = cloud.labels[idx]
        z = T.matmul(x, w)
        rep = metric_loss(z, y, bank, cfg.loss, rng, cfg.negatives)
        loss = T.scale(rep.loss, cfg.lam / len(idx))
        if cfg.head != "none":
            loss = T.add(T.softmax_cross_entropy(T.matmul(z, head), y), loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        apply_center_update(bank, z.data, y, rep)
        result.history.append(rep.record(step))
    final = cloud.points @ w.data
    d_pos, d_neg = pos_neg_distances(final, cloud.labels, bank.centers, "nearest")
    result.mean_d_pos, result.mean_d_neg = float(d_pos.mean()), float(d_neg.mean())
    result.weights, result.centers = w.data.copy(), bank.centers.copy()
    return result


def compression_contrast(cloud: FeatureCloud, base: CenterSimConfig | None = None) -> dict:
    """TCL (margin 5.0) and CTCL (margin 4.5) on the same cloud and seed."""
    base = base or CenterSimConfig()
    out = {}
    for kind, margin in (("tcl", TCL_MARGIN), ("ctcl", CTCL_MARGIN)):
        cfg = CenterSimConfig(**{**asdict(base), "loss": kind, "margin": margin})
        out[kind] = simulate(cloud, cfg)
    return out


def margin_trend(cloud: FeatureCloud, margins=(5.0, 50.0, 300.0), base: CenterSimConfig | None = None,
                 loss: str = "tcl") -> list[CenterSimResult]:
    """One run per margin; by default without a softmax head so the margin
    alone sets the distance scale."""
    base = base or CenterSimConfig(head="none")
    return [simulate(cloud, CenterSimConfig(**{**asdict(base), "loss": loss, "margin": float(m)}))
            for m in margins]
