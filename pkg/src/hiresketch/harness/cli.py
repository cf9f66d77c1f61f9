"""Command-line entry point: ``hiresketch <command> [options]``.

Every command exits nonzero when a contract is violated (status 2), when
training aborts (status 3) or when a check it runs fails (status 1).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from ..blocks import expected_active_params
from ..data import (FoldPlan, apply_augment, draw_augment, generate_feature_cloud,
                    generate_synthetic_sketches, load_dataset, make_folds, read_raster, save_dataset)
from ..errors import ContractError, LoadError, TrainingError
from ..network import HierarchicalResNet, NetworkConfig, count_parameters, load_checkpoint, stage_conv_params
from . import centersim as cs
from .analysis import class_means, distance_report, pca_project
from .config import dump_config, load_config, merge
from .experiments import ABLATIONS, SWEEP_FIELDS, ablate, sweep
from .gradcheck import EXTRA_OPERATORS, OPERATORS, feature_grad_agreement, run_operator
from .training import TrainConfig, evaluate, forward_dataset, train

log = logging.getLogger("hiresketch")


# -- option helpers ----------------------------------------------------------

def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One ``--field-name`` flag per dataclass field, defaulting to None so
    that unset flags fall through to the config file or the defaults."""
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = hints[f.name]
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        base = args[0] if args else kind
        if base is bool:
            parser.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=base,
                                help=f"default: {f.default!r}")


def _dataclass_overrides(ns: argparse.Namespace, cls) -> dict:
    return {f.name: getattr(ns, f.name) for f in dataclasses.fields(cls) if hasattr(ns, f.name)}


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path, help="image folder: one subdirectory per class")
    g.add_argument("--side", type=int, default=255, help="canvas side for loaded images")
    g.add_argument("--synthetic", action="store_true", help="use generated sketches instead of --data")
    g.add_argument("--synthetic-classes", type=int, default=8)
    g.add_argument("--synthetic-per-class", type=int, default=90)
    g.add_argument("--synthetic-side", type=int, default=72)
    g.add_argument("--synthetic-seed", type=int, default=7)
    g.add_argument("--folds", type=Path, help="fold plan JSON to reuse")


def _dataset(ns):
    if ns.synthetic:
        return generate_synthetic_sketches(ns.synthetic_classes, ns.synthetic_per_class,
                                           ns.synthetic_side, ns.synthetic_seed)
    if ns.data is None:
        raise ContractError("give --data DIR or --synthetic")
    return load_dataset(ns.data, ns.side)


def _train_config(ns) -> TrainConfig:
    file_values = load_config(ns.config, TrainConfig) if ns.config else {}
    return merge(TrainConfig, file_values, _dataclass_overrides(ns, TrainConfig))


def _plan(ns, dataset, cfg: TrainConfig) -> FoldPlan:
    if ns.folds:
        return FoldPlan.from_json(ns.folds.read_text())
    return make_folds(dataset, cfg.seed, cfg.n_folds, cfg.val_fraction)


def _out_dir(path: Path | None) -> Path | None:
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True, default=float))


# -- commands ----------------------------------------------------------------

def cmd_train(ns) -> int:
    cfg = _train_config(ns)
    dataset = _dataset(ns)
    plan = _plan(ns, dataset, cfg)
    out = _out_dir(ns.out)
    model = HierarchicalResNet(cfg.network_config(len(dataset.classes)))
    paths = {}
    if out:
        (out / "config.txt").write_text(dump_config(cfg))
        (out / "folds.json").write_text(plan.to_json())
        paths = {"log_path": out / "steps.jsonl", "checkpoint_path": out / "checkpoint.npz"}
    rec = train(model, dataset, cfg, plan=plan, **paths)
    summary = {"train_accuracy": rec.train_accuracy, "test_accuracy": rec.test_accuracy,
               "best_val_accuracy": rec.best_val_accuracy, "best_epoch": rec.best_epoch,
               "embedding_ratio": rec.embedding_ratio, "wall_clock": rec.wall_clock,
               "digest": rec.digest()}
    if out:
        _write_csv(out / "epochs.csv", rec.epochs)
        (out / "record.json").write_text(json.dumps({**summary, "config": rec.config,
                                                     "epochs": rec.epochs}, indent=1))
    _emit(summary)
    return 0


def cmd_eval(ns) -> int:
    dataset = _dataset(ns)
    model, header = load_checkpoint(ns.checkpoint)
    classes = header.get("classes")
    if classes is not None and list(classes) != list(dataset.classes):
        raise ContractError("class registry of the dataset does not match the checkpoint")
    if ns.folds:
        _, _, test_ids = FoldPlan.from_json(ns.folds.read_text()).split(ns.fold)
        dataset = dataset.subset(test_ids)
    res = evaluate(model, dataset)
    out = _out_dir(ns.out)
    if out:
        _write_csv(out / "per_class.csv", [{"class": k, "accuracy": v} for k, v in res.per_class.items()])
        np.savetxt(out / "confusion.csv", res.confusion, fmt="%d", delimiter=",")
        (out / "misclassified.txt").write_text("".join(f"{i}\n" for i in res.misclassified))
    _emit({"accuracy": res.accuracy, "samples": len(dataset), "misclassified": len(res.misclassified),
           "per_class": res.per_class})
    return 0


def cmd_gradcheck(ns) -> int:
    names = ns.ops or list(OPERATORS)
    if ns.with_network:
        names += list(EXTRA_OPERATORS)
    rows, failed = [], 0
    for name in names:
        for seed in range(ns.seeds):
            r = run_operator(name, seed, ns.step, ns.tolerance)
            rows.append(r.to_dict())
            failed += not r.passed
        worst = max(x["max_rel_error"] for x in rows if x["name"] == name)
        print(f"{'PASS' if worst <= ns.tolerance else 'FAIL'} {name:28s} max rel err {worst:.3e}")
    agreement = feature_grad_agreement(ns.instances)
    ok = agreement <= 1e-10
    failed += not ok
    print(f"{'PASS' if ok else 'FAIL'} {'feature_update_agreement':28s} max rel err {agreement:.3e}")
    if ns.out:
        _write_csv(ns.out, rows)
    return 1 if failed else 0


def cmd_params(ns) -> int:
    kw = {k: getattr(ns, k) for k in ("alpha", "beta", "input_side", "num_classes") if getattr(ns, k) is not None}
    make = NetworkConfig.desk if ns.preset == "desk" else NetworkConfig
    rows = {}
    for block in ("multiscale", "basic"):
        model = HierarchicalResNet(make(block=block, **kw))
        rows[block] = {"total": count_parameters(model), "stage_convs": stage_conv_params(model)}
    ms = rows["multiscale"]["stage_convs"]
    cfg = make(**kw)
    report = {
        "preset": ns.preset,
        "multiscale": rows["multiscale"],
        "basic": rows["basic"],
        "stage_conv_ratio": ms / rows["basic"]["stage_convs"],
        "expected_active_stage_convs": expected_active_params(ms, cfg.alpha),
        "shapes": {k: list(v) for k, v in cfg.shape_plan().items()},
    }
    _emit(report)
    return 0


def _cloud(ns):
    return generate_feature_cloud(ns.classes, ns.dim, ns.spread, ns.cloud_seed, ns.per_class,
                                     ns.separation, ns.rank)


def cmd_centersim(ns) -> int:
    cloud = _cloud(ns)
    base = merge(cs.CenterSimConfig, {}, _dataclass_overrides(ns, cs.CenterSimConfig))
    out = _out_dir(ns.out)
    if ns.mode == "contrast":
        results = list(cs.compression_contrast(cloud, base).values())
    elif ns.mode == "trend":
        trend_base = dataclasses.replace(base, head=ns.head or "none")
        results = cs.margin_trend(cloud, ns.margins, trend_base, loss=base.loss if ns.loss else "tcl")
    else:
        results = [cs.simulate(cloud, base)]
    rows = [r.summary() for r in results]
    for r in rows:
        print(f"{r['loss']:5s} m={r['margin']:<7g} D_pos={r['mean_d_pos']:.6g} "
              f"D_neg={r['mean_d_neg']:.6g} ratio={r['ratio']:.4f}")
    if out:
        _write_csv(out / "summary.csv", rows)
        for r in results:
            r.write_history(out / f"history_{r.config['loss']}_m{r.config['margin']:g}.jsonl")
    return 0


def cmd_distances(ns) -> int:
    dataset = _dataset(ns)
    model, header = load_checkpoint(ns.checkpoint)
    _, emb = forward_dataset(model, dataset)
    labels = dataset.labels
    centers = header.get("centers")
    if centers is None or ns.class_means:
        centers = class_means(emb, labels, len(dataset.classes))
    rep = distance_report(emb, labels, centers, ns.n_show, ns.negatives)
    out = _out_dir(ns.out)
    if out:
        (out / "distances.csv").write_text(rep.to_csv())
        coords = pca_project(emb)
        _write_csv(out / "pca.csv", [{"id": i, "label": int(y), "pc1": float(a), "pc2": float(b)}
                                     for i, y, (a, b) in zip(dataset.ids, labels, coords)])
    else:
        sys.stdout.write(rep.to_csv())
    _emit({"mean_d_pos": rep.mean_d_pos, "std_d_pos": rep.std_d_pos, "mean_d_neg": rep.mean_d_neg,
           "std_d_neg": rep.std_d_neg, "ratio": rep.ratio})
    return 0


def cmd_sweep(ns) -> int:
    cfg = _train_config(ns)
    dataset = _dataset(ns)
    table = sweep(ns.param, ns.values, cfg, dataset)
    if ns.out:
        ns.out.write_text(table.to_csv())
    sys.stdout.write(table.to_csv())
    _emit({"param": ns.param, "best": table.best})
    return 0


def cmd_ablate(ns) -> int:
    cfg = _train_config(ns)
    dataset = _dataset(ns)
    table = ablate(ns.kind, cfg, dataset)
    if ns.out:
        ns.out.write_text(table.to_csv())
    sys.stdout.write(table.to_csv())
    return 0


def cmd_augment_preview(ns) -> int:
    from PIL import Image

    if ns.image:
        if not ns.image.is_file():
            raise LoadError(f"no such image: {ns.image}")
        image, name = read_raster(ns.image, ns.side), ns.image.name
    else:
        ds = generate_synthetic_sketches(ns.synthetic_class + 1, 1, ns.side, ns.seed)
        image, name = ds.samples[ns.synthetic_class].image, ds.samples[ns.synthetic_class].source_id
    max_shift = image.shape[0] - ns.crop
    if max_shift < 0:
        raise ContractError(f"crop {ns.crop} exceeds canvas {image.shape[0]}")
    out = _out_dir(ns.out)
    rng = np.random.default_rng(ns.seed)
    with open(out / "params.jsonl", "w") as fh:
        for i in range(ns.count):
            params = draw_augment(rng, ns.max_rotation, max_shift)
            view = apply_augment(image, params, ns.crop)
            pixels = np.clip(np.round(view * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(out / f"view_{i:03d}.png")
            fh.write(json.dumps({"index": i, **dataclasses.asdict(params)}) + "\n")
    print(f"wrote {ns.count} views of {name} to {out}")
    return 0


def cmd_export_synthetic(ns) -> int:
    ds = generate_synthetic_sketches(ns.synthetic_classes, ns.synthetic_per_class,
                                     ns.synthetic_side, ns.synthetic_seed)
    save_dataset(ds, ns.out)
    print(f"wrote {len(ds)} sketches in {len(ds.classes)} classes to {ns.out}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiresketch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_train_flags(sp):
        sp.add_argument("--config", type=Path, help="key = value file; flags override it")
        _add_dataclass_flags(sp, TrainConfig)
        _add_data_flags(sp)

    sp = sub.add_parser("train", help="train with the joint loss")
    with_train_flags(sp)
    sp.add_argument("--out", type=Path, help="run directory (logs, tables, checkpoint)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(sp)
    sp.add_argument("--fold", type=int, default=0, help="test fold when --folds is given")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--ops", nargs="*", choices=list(OPERATORS) + list(EXTRA_OPERATORS))
    sp.add_argument("--with-network", action="store_true", help="also check a tiny full network")
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--instances", type=int, default=100, help="random instances for the feature-update check")
    sp.add_argument("--out", type=Path, help="CSV of per-seed results")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("params", help="parameter accounting and shape plan")
    sp.add_argument("--preset", choices=["full", "desk"], default="full")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--input-side", type=int)
    sp.add_argument("--num-classes", type=int)
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("centersim", help="metric-loss dynamics on a feature cloud")
    sp.add_argument("--mode", choices=["single", "contrast", "trend"], default="contrast")
    sp.add_argument("--margins", type=float, nargs="+", default=[5.0, 50.0, 300.0])
    sp.add_argument("--classes", type=int, default=20)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--spread", type=float, default=1.0)
    sp.add_argument("--separation", type=float, default=6.0)
    sp.add_argument("--rank", type=int, default=8)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--cloud-seed", type=int, default=0)
    _add_dataclass_flags(sp, cs.CenterSimConfig)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_centersim)

    sp = sub.add_parser("distances", help="D_pos / D_neg table and PCA coordinates")
    sp.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(sp)
    sp.add_argument("--n-show", type=int, default=20)
    sp.add_argument("--negatives", choices=["nearest", "mean"], default="nearest")
    sp.add_argument("--class-means", action="store_true", help="ignore stored centers")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_distances)

    sp = sub.add_parser("sweep", help="one run per value of a hyper-parameter")
    sp.add_argument("param", choices=sorted(SWEEP_FIELDS))
    sp.add_argument("values", type=float, nargs="*")
    with_train_flags(sp)
    sp.add_argument("--out", type=Path, help="CSV table")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="matched-seed ablation table")
    sp.add_argument("kind", choices=sorted(ABLATIONS))
    with_train_flags(sp)
    sp.add_argument("--out", type=Path, help="CSV table")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("augment-preview", help="write augmented views of one sketch")
    sp.add_argument("--image", type=Path, help="PNG/PGM raster; default is a synthetic sketch")
    sp.add_argument("--synthetic-class", type=int, default=0)
    sp.add_argument("--side", type=int, default=255)
    sp.add_argument("--crop", type=int, default=224)
    sp.add_argument("--max-rotation", type=int, default=5)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_augment_preview)

    sp = sub.add_parser("export-synthetic", help="write generated sketches as PNG folders")
    sp.add_argument("--synthetic-classes", type=int, default=8)
    sp.add_argument("--synthetic-per-class", type=int, default=90)
    sp.add_argument("--synthetic-side", type=int, default=72)
    sp.add_argument("--synthetic-seed", type=int, default=7)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_export_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except TrainingError as exc:
        print(f"training aborted: {exc}; batch ids: {exc.batch_ids}", file=sys.stderr)
        return 3
    except (ContractError, LoadError, IndexError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
