"""Training and evaluation loops for the sketch network."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..data import SketchDataset, FoldPlan, augment, eval_view, make_folds, sample_rng
from ..errors import ContractError, TrainingError
from ..losses import CTCL_MARGIN, TCL_MARGIN, CenterBank, JointLossConfig, apply_center_update, joint_loss
from ..network import HierarchicalResNet, NetworkConfig, load_checkpoint, save_checkpoint
from ..tensor import Tensor, no_grad
from .analysis import class_means, distance_ratio
from .schedule import Adam, lr_at

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 180
    batch_size: int = 28
    lr: float = 1e-3
    lr_decay: float = 0.65
    lr_step: int = 10
    lr_switch: int = 100
    lr_late_decay: float = 0.95
    lr_late_step: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.024
    loss: str = "ctcl"
    negatives: str = "random"
    margin: float | None = None
    eta: float = 0.05
    metric_reduction: str = "mean"
    seed: int = 0
    fold: int = 0
    n_folds: int = 3
    val_fraction: float = 0.15
    augment: bool = True
    max_rotation: int = 5
    keep_best: bool = True
    max_steps: int | None = None
    preset: str = "full"
    alpha: float = 0.75
    beta: float = 0.7
    block: str = "multiscale"
    inner_skip: bool = True
    outer_skip: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or not 0.0 < self.eta <= 1.0:
            raise ContractError("learning rates must be positive (eta in (0, 1])")
        if self.loss not in ("ctcl", "tcl"):
            raise ContractError(f"unknown metric loss {self.loss!r}")
        if self.preset not in ("full", "desk"):
            raise ContractError(f"unknown network preset {self.preset!r}")
        if self.margin is None:
            self.margin = TCL_MARGIN if self.loss == "tcl" else CTCL_MARGIN

    def network_config(self, num_classes: int | None = None) -> NetworkConfig:
        """The network described by this run (weights seeded by ``seed``)."""
        kw = dict(alpha=self.alpha, beta=self.beta, block=self.block, inner_skip=self.inner_skip,
                  outer_skip=self.outer_skip, seed=self.seed)
        if num_classes is not None:
            kw["num_classes"] = num_classes
        return NetworkConfig.desk(**kw) if self.preset == "desk" else NetworkConfig(**kw)

    def lr_for(self, epoch: int) -> float:
        return lr_at(epoch, self.lr, self.lr_decay, self.lr_step, self.lr_switch,
                     self.lr_late_decay, self.lr_late_step)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RunRecord:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    best_val_accuracy: float = float("nan")
    best_epoch: int = -1
    embedding_ratio: float = float("nan")
    wall_clock: float = 0.0

    def digest(self) -> str:
        """Hash of everything except wall-clock time."""
        d = asdict(self)
        d.pop("wall_clock")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def write_steps(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    confusion: np.ndarray
    misclassified: list[str]
    embeddings: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)


def _stack(images) -> Tensor:
    return Tensor(np.stack(images)[:, None, :, :])


def forward_dataset(model: HierarchicalResNet, dataset: SketchDataset, batch_size: int = 64):
    """Eval-mode logits and embeddings for every sample (deterministic view)."""
    crop = model.cfg.input_side
    model.eval()
    logits, embs = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset.samples[start:start + batch_size]
            out = model(_stack([eval_view(s.image, crop) for s in chunk]))
            logits.append(out.logits.data)
            embs.append(out.embedding.data)
    return np.concatenate(logits), np.concatenate(embs)


def evaluate(model: HierarchicalResNet, dataset: SketchDataset, batch_size: int = 64) -> EvalResult:
    """Top-1 accuracy, per-class accuracy, confusion matrix and the ids of
    misclassified samples, using the fused (eval-mode) blocks."""
    n_classes = model.cfg.num_classes
    if len(dataset.classes) != n_classes:
        raise ContractError(f"dataset has {len(dataset.classes)} classes, model expects {n_classes}")
    logits, embs = forward_dataset(model, dataset, batch_size)
    labels = dataset.labels
    pred = logits.argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    per_class = {}
    for k, name in enumerate(dataset.classes):
        total = confusion[k].sum()
        per_class[name] = float(confusion[k, k] / total) if total else float("nan")
    wrong = [s.source_id for s, p in zip(dataset.samples, pred) if p != s.label]
    return EvalResult(float(np.mean(pred == labels)), per_class, confusion, wrong, embs, labels, pred)


def evaluate_checkpoint(path, dataset: SketchDataset) -> EvalResult:
    model, header = load_checkpoint(path)
    classes = header.get("classes")
    if classes is not None and list(classes) != list(dataset.classes):
        raise ContractError("class registry of the dataset does not match the checkpoint")
    return evaluate(model, dataset)


def embedding_ratio(embeddings: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """mean D_pos / mean D_neg against per-class mean embeddings."""
    return distance_ratio(embeddings, labels, class_means(embeddings, labels, n_classes))


def train_step(model: HierarchicalResNet, images: Tensor, labels: np.ndarray, bank: CenterBank,
               opt: Adam, jcfg: JointLossConfig, branch_rng, negative_rng, trace: dict | None = None):
    """forward (branch sampling) -> joint loss -> backward -> Adam -> center
    update.  Raises TrainingError before touching any state on a non-finite
    loss."""
    out = model(images, branch_rng, trace)
    rep = joint_loss(out, labels, bank, jcfg, negative_rng)
    if not np.isfinite(rep.total):
        raise TrainingError("non-finite loss")
    opt.zero_grad()
    rep.loss.backward()
    opt.step()
    apply_center_update(bank, out.embedding.data, labels, rep)
    return out, rep


def dry_run(model: HierarchicalResNet, dataset: SketchDataset, cfg: TrainConfig) -> dict:
    """One full training step on the first ``batch_size`` samples; returns
    the traced (C, H, W) shapes and the step record."""
    crop = model.cfg.input_side
    batch = dataset.samples[:cfg.batch_size]
    images = [augment(s, sample_rng(cfg.seed, 0, i), crop, cfg.max_rotation).image
              for i, s in enumerate(batch)]
    bank = CenterBank.initialize(model.cfg.num_classes, model.cfg.stages[-1][0], cfg.margin,
                                 cfg.eta, seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    jcfg = JointLossConfig(cfg.lam, cfg.loss, cfg.negatives, cfg.metric_reduction)
    trace: dict = {}
    model.train()
    _, rep = train_step(model, _stack(images), np.array([s.label for s in batch]), bank, opt, jcfg,
                        np.random.default_rng([cfg.seed, 1]), np.random.default_rng([cfg.seed, 2]), trace)
    return {"shapes": trace, "record": rep.record(0)}


def train(model: HierarchicalResNet, dataset: SketchDataset, cfg: TrainConfig,
          plan: FoldPlan | None = None, log_path=None, checkpoint_path=None) -> RunRecord:
    """Joint-loss training on one fold split.

    Per step: augment -> forward with branch sampling -> joint loss ->
    backward -> Adam on the weights -> closed-form center update.
    Validation accuracy is tracked every epoch and the best weights are
    written to ``checkpoint_path`` when given.
    """
    started = time.perf_counter()
    if len(dataset.classes) != model.cfg.num_classes:
        raise ContractError("dataset class count differs from the network head")
    plan = plan or make_folds(dataset, cfg.seed, cfg.n_folds, cfg.val_fraction)
    fit_ids, val_ids, test_ids = plan.split(cfg.fold)
    fit, val, test = dataset.subset(fit_ids), dataset.subset(val_ids), dataset.subset(test_ids)
    crop = model.cfg.input_side
    if dataset.side < crop:
        raise ContractError(f"images are {dataset.side}px, network needs {crop}px")

    branch_rng = np.random.default_rng([cfg.seed, 1])
    negative_rng = np.random.default_rng([cfg.seed, 2])
    order_rng = np.random.default_rng([cfg.seed, 3])
    jcfg = JointLossConfig(cfg.lam, cfg.loss, cfg.negatives, cfg.metric_reduction)
    emb_dim = model.cfg.stages[-1][0]
    bank = CenterBank.initialize(model.cfg.num_classes, emb_dim, cfg.margin, cfg.eta, seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    record = RunRecord(config={"train": cfg.to_dict(), "network": model.cfg.to_dict()})
    index = {s.source_id: i for i, s in enumerate(dataset.samples)}
    log_fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cfg.lr_for(epoch)
            model.train()
            order = order_rng.permutation(len(fit))
            correct, seen, loss_sum = 0, 0, 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [fit.samples[i] for i in order[start:start + cfg.batch_size]]
                if cfg.augment:
                    images = [augment(s, sample_rng(cfg.seed, epoch, index[s.source_id]), crop,
                                      cfg.max_rotation).image for s in batch]
                else:
                    images = [eval_view(s.image, crop) for s in batch]
                labels = np.array([s.label for s in batch])
                try:
                    out, rep = train_step(model, _stack(images), labels, bank, opt, jcfg,
                                          branch_rng, negative_rng)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} at epoch {epoch} step {step}",
                                        [s.source_id for s in batch]) from None
                rec = rep.record(step)
                record.steps.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                correct += int(np.sum(out.logits.data.argmax(axis=1) == labels))
                seen += len(batch)
                loss_sum += rep.total * len(batch)
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            entry = {"epoch": epoch, "lr": opt.lr, "train_loss": loss_sum / max(seen, 1),
                     "train_accuracy": correct / max(seen, 1)}
            if len(val):
                entry["val_accuracy"] = evaluate(model, val).accuracy
                if entry["val_accuracy"] > record.best_val_accuracy or record.best_epoch < 0:
                    record.best_val_accuracy, record.best_epoch = entry["val_accuracy"], epoch
                    if cfg.keep_best and checkpoint_path:
                        save_checkpoint(checkpoint_path, model, centers=bank.centers,
                                        classes=dataset.classes, epoch=epoch)
            record.epochs.append(entry)
            log.info("epoch %d %s", epoch, entry)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()

    if checkpoint_path and not (cfg.keep_best and len(val)):
        save_checkpoint(checkpoint_path, model, centers=bank.centers, classes=dataset.classes)
    fit_eval = evaluate(model, fit)
    record.train_accuracy = fit_eval.accuracy
    record.embedding_ratio = embedding_ratio(fit_eval.embeddings, fit_eval.labels, model.cfg.num_classes)
    if len(test):
        record.test_accuracy = evaluate(model, test).accuracy
    record.wall_clock = time.perf_counter() - started
    record.bank = bank
    return record
