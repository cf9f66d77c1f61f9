import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiresketch.errors import ContractError
from hiresketch.harness.centersim import CenterSimConfig
from hiresketch.harness.cli import main
from hiresketch.harness.config import coerce, dump_config, load_config, merge, parse_config_text
from hiresketch.harness.training import TrainConfig

SMALL = ["--synthetic", "--synthetic-classes", "4", "--synthetic-per-class", "9"]
QUICK = ["--preset", "desk", "--epochs", "1", "--batch-size", "8", "--max-steps", "1"]


def last_json(text: str) -> dict:
    return json.loads(text[text.rindex("\n{") + 1:] if "\n{" in text else text)


# -- config files ------------------------------------------------------------------

def test_parse_types_and_comments():
    # only "#" starts an inline comment
    with pytest.raises(ContractError):
        parse_config_text("# run\nepochs = 3 ; three\n", TrainConfig)
    vals = parse_config_text("lam = 0.1  # weight\nmax-steps = none\naugment = off\nloss = tcl\n", TrainConfig)
    assert vals == {"lam": 0.1, "max_steps": None, "augment": False, "loss": "tcl"}


def test_unknown_key_rejected():
    with pytest.raises(ContractError, match="learning"):
        parse_config_text("learning = 1\n", TrainConfig)


def test_bad_values_rejected():
    with pytest.raises(ContractError):
        parse_config_text("epochs = many\n", TrainConfig)
    with pytest.raises(ContractError):
        parse_config_text("augment = maybe\n", TrainConfig)
    with pytest.raises(ContractError):
        parse_config_text("this is not a pair\n", TrainConfig)


def test_flags_override_file_which_overrides_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lam = 0.1\nseed = 5\n")
    cfg = merge(TrainConfig, load_config(path, TrainConfig), {"lam": 0.2, "seed": None})
    assert cfg.lam == 0.2 and cfg.seed == 5 and cfg.epochs == TrainConfig().epochs


def test_dump_round_trip():
    cfg = TrainConfig(lam=0.3, max_steps=None, augment=False, margin=4.0)
    assert merge(TrainConfig, parse_config_text(dump_config(cfg), TrainConfig)) == cfg
    sim = CenterSimConfig(loss="tcl", steps=9)
    assert merge(CenterSimConfig, parse_config_text(dump_config(sim), CenterSimConfig)) == sim


@given(st.integers(-10**9, 10**9))
def test_coerce_int_round_trip(n):
    assert coerce(f" {n} ", int) == n


@given(st.floats(allow_nan=False))
def test_coerce_float_round_trip(x):
    assert coerce(repr(x), float) == x


# -- commands ----------------------------------------------------------------------

def test_params_desk(capsys):
    assert main(["params", "--preset", "desk"]) == 0
    out = last_json(capsys.readouterr().out)
    assert out["shapes"]["front_end"] == [16, 16, 16]
    assert out["multiscale"]["total"] > out["basic"]["total"]


def test_train_eval_distances_round_trip(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("lam = 0.5\nseed = 4\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--lam", "0.1", "--out", str(run)] + QUICK + SMALL) == 0
    summary = last_json(capsys.readouterr().out)
    stored = parse_config_text((run / "config.txt").read_text(), TrainConfig)
    assert stored["lam"] == 0.1 and stored["seed"] == 4
    assert len((run / "steps.jsonl").read_text().splitlines()) == 1
    assert (run / "epochs.csv").read_text().startswith("epoch,")
    assert json.loads((run / "record.json").read_text())["digest"] == summary["digest"]

    ev = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(run / "checkpoint.npz"), "--folds", str(run / "folds.json"), "--out", str(ev)]
    assert main(args + SMALL) == 0
    result = last_json(capsys.readouterr().out)
    assert result["samples"] == 12 and 0.0 <= result["accuracy"] <= 1.0
    conf = np.loadtxt(ev / "confusion.csv", delimiter=",")
    assert conf.shape == (4, 4) and conf.sum() == 12

    dist = tmp_path / "dist"
    assert main(["distances", "--checkpoint", str(run / "checkpoint.npz"), "--out", str(dist)] + SMALL) == 0
    rep = last_json(capsys.readouterr().out)
    assert rep["ratio"] == pytest.approx(rep["mean_d_pos"] / rep["mean_d_neg"])
    assert len((dist / "pca.csv").read_text().splitlines()) == 37

    other = ["--synthetic", "--synthetic-classes", "5", "--synthetic-per-class", "2"]
    assert main(["eval", "--checkpoint", str(run / "checkpoint.npz")] + other) == 2


def test_missing_data_source_exits_2(capsys):
    assert main(["train"] + QUICK) == 2
    assert "--synthetic" in capsys.readouterr().err


def test_invalid_flag_value_exits_2():
    assert main(["train", "--loss", "hinge"] + QUICK + SMALL) == 2


def test_gradcheck_subset(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--ops", "relu", "matmul", "--seeds", "2", "--instances", "5", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == ["PASS"] * 3
    assert len(out.read_text().splitlines()) == 5


def test_gradcheck_failure_exits_1(capsys):
    assert main(["gradcheck", "--ops", "relu", "--seeds", "1", "--instances", "2", "--tolerance", "0"]) == 1
    assert capsys.readouterr().out.startswith("FAIL")


def test_centersim_single(tmp_path, capsys):
    args = ["centersim", "--mode", "single", "--classes", "4", "--dim", "4", "--rank", "4",
            "--per-class", "10", "--steps", "5", "--batch-size", "8", "--out", str(tmp_path)]
    assert main(args) == 0
    assert "ratio=" in capsys.readouterr().out
    assert (tmp_path / "summary.csv").exists()
    assert len((tmp_path / "history_ctcl_m4.5.jsonl").read_text().splitlines()) == 5


def test_centersim_trend_writes_one_row_per_margin(tmp_path, capsys):
    args = ["centersim", "--mode", "trend", "--margins", "5", "50", "--classes", "4", "--dim", "4",
            "--rank", "4", "--per-class", "10", "--steps", "5", "--batch-size", "8", "--out", str(tmp_path)]
    assert main(args) == 0
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 3


def test_sweep_and_ablate(tmp_path, capsys):
    table = tmp_path / "sweep.csv"
    assert main(["sweep", "beta", "0.5", "0.7", "--out", str(table)] + QUICK + SMALL) == 0
    assert last_json(capsys.readouterr().out)["param"] == "beta"
    assert len(table.read_text().splitlines()) == 3
    assert main(["sweep", "beta"] + QUICK + SMALL) == 2
    capsys.readouterr()
    assert main(["ablate", "loss", "--out", str(tmp_path / "ab.csv")] + QUICK + SMALL) == 0
    assert "delta" in (tmp_path / "ab.csv").read_text().splitlines()[0]


def test_augment_preview(tmp_path, capsys):
    args = ["augment-preview", "--side", "72", "--crop", "64", "--count", "3", "--out", str(tmp_path)]
    assert main(args) == 0
    assert len(list(tmp_path.glob("view_*.png"))) == 3
    params = [json.loads(x) for x in (tmp_path / "params.jsonl").read_text().splitlines()]
    assert all(0 <= p["dx"] <= 8 for p in params)
    assert main(["augment-preview", "--side", "40", "--crop", "64", "--out", str(tmp_path)]) == 2
    assert main(["augment-preview", "--image", str(tmp_path / "nope.png"), "--out", str(tmp_path)]) == 2


def test_export_synthetic(tmp_path):
    assert main(["export-synthetic", "--synthetic-classes", "2", "--synthetic-per-class", "3",
                 "--synthetic-side", "40", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.rglob("*.png"))) == 6


def test_console_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hiresketch", "params", "--preset", "desk"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "stage_conv_ratio" in proc.stdout
