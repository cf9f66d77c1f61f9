"""Hyper-parameter sweeps and matched-seed ablations at desk scale."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

from ..data import SketchDataset, generate_synthetic_sketches, make_folds
from ..errors import ContractError
from ..losses import CTCL_MARGIN, TCL_MARGIN
from ..network import HierarchicalResNet
from .training import RunRecord, TrainConfig, train

log = logging.getLogger(__name__)

# Sweepable names and the TrainConfig field each one sets.
SWEEP_FIELDS = {"beta": "beta", "m": "margin", "alpha": "alpha", "lam": "lam", "eta": "eta"}
M_STABLE_BAND = (2.5, 5.5)

ABLATIONS = {
    "block": [("multiscale", {"block": "multiscale"}), ("basic", {"block": "basic"})],
    "residual-level": [
        ("inner+outer", {"inner_skip": True, "outer_skip": True}),
        ("inner-only", {"inner_skip": True, "outer_skip": False}),
        ("outer-only", {"inner_skip": False, "outer_skip": True}),
    ],
    "loss": [("ctcl", {"loss": "ctcl", "margin": CTCL_MARGIN}),
             ("tcl", {"loss": "tcl", "margin": TCL_MARGIN})],
}


def desk_dataset(seed: int = 7, n_classes: int = 8, per_class: int = 90, side: int = 72) -> SketchDataset:
    """Synthetic sketches sized for the reduced network (64px crops with an
    8px augmentation margin)."""
    return generate_synthetic_sketches(n_classes, per_class, side, seed)


def desk_config(**overrides) -> TrainConfig:
    base = dict(epochs=30, preset="desk", seed=1)
    base.update(overrides)
    return TrainConfig(**base)


def run_one(dataset: SketchDataset, cfg: TrainConfig, plan=None, **paths) -> RunRecord:
    model = HierarchicalResNet(cfg.network_config(len(dataset.classes)))
    return train(model, dataset, cfg, plan=plan, **paths)


@dataclass
class Table:
    title: str
    rows: list[dict] = field(default_factory=list)
    records: list[RunRecord] = field(default_factory=list, repr=False)
    best: object = None

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def _summary(rec: RunRecord) -> dict:
    return {"train_accuracy": rec.train_accuracy, "test_accuracy": rec.test_accuracy,
            "best_val_accuracy": rec.best_val_accuracy, "embedding_ratio": rec.embedding_ratio,
            "digest": rec.digest()[:16]}


def sweep(param: str, values, base: TrainConfig, dataset: SketchDataset) -> Table:
    """One run per value on a shared seed and fold plan; ``best`` is the
    value with the highest held-out accuracy (first one on ties)."""
    values = list(values)
    if not values:
        raise ContractError("a sweep needs at least one value")
    if param not in SWEEP_FIELDS:
        raise ContractError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_FIELDS)}")
    plan = make_folds(dataset, base.seed, base.n_folds, base.val_fraction)
    table = Table(f"sweep {param}")
    for v in values:
        cfg = replace(base, **{SWEEP_FIELDS[param]: float(v)})
        rec = run_one(dataset, cfg, plan)
        row = {param: float(v), **_summary(rec)}
        if param == "m":
            row["stable_band"] = M_STABLE_BAND[0] <= float(v) <= M_STABLE_BAND[1]
        table.rows.append(row)
        table.records.append(rec)
        log.info("sweep %s=%s -> %s", param, v, row)
    scores = [r["test_accuracy"] for r in table.rows]
    table.best = table.rows[max(range(len(scores)), key=lambda i: (scores[i], -i))][param]
    return table


def ablate(kind: str, base: TrainConfig, dataset: SketchDataset, variants=None) -> Table:
    """Matched-seed runs of each variant; ``delta`` is the held-out accuracy
    minus that of the first (reference) variant."""
    variants = ABLATIONS.get(kind) if variants is None else variants
    if variants is None:
        raise ContractError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}")
    plan = make_folds(dataset, base.seed, base.n_folds, base.val_fraction)
    table = Table(f"ablate {kind}")
    ref = None
    for name, changes in variants:
        cfg = replace(base, **changes)
        rec = run_one(dataset, cfg, plan)
        summary = _summary(rec)
        ref = summary["test_accuracy"] if ref is None else ref
        table.rows.append({"variant": name, **summary, "delta": summary["test_accuracy"] - ref})
        table.records.append(rec)
        log.info("ablate %s/%s -> %s", kind, name, table.rows[-1])
    return table
