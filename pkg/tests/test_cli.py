from __future__ import annotations

import json

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import small_config
from xmodal import reproduce as reproduce_mod
from xmodal.cli import main
from xmodal.config import dump_config
from xmodal.datasets import SyntheticDataset
from xmodal.reproduce import ReportBundle, TrendCheck


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(dump_config(small_config()))
    return p


def test_gen_data_balanced(runner, tmp_path):
    res = runner.invoke(main, ["gen-data", "--num-classes", "10", "--per-class", "100", "--out", str(tmp_path / "d")])
    assert res.exit_code == 0, res.output
    ds = SyntheticDataset.load(tmp_path / "d")
    assert len(ds.train) == 1000
    assert np.bincount(ds.train.labels).tolist() == [100] * 10
    assert "train per class: 1:100 2:100" in res.output


def test_gen_data_imbalanced(runner, tmp_path):
    res = runner.invoke(
        main, ["gen-data", "--num-classes", "10", "--per-class", "500", "--imbalance-factor", "100", "--out", str(tmp_path / "d")]
    )
    assert res.exit_code == 0, res.output
    counts = np.bincount(SyntheticDataset.load(tmp_path / "d").train.labels)
    assert counts[0] / counts[-1] == pytest.approx(100, rel=0.01)


def test_gen_data_same_seed_same_files(runner, tmp_path):
    for name in ("a", "b"):
        assert runner.invoke(main, ["gen-data", "--seed", "3", "--out", str(tmp_path / name)]).exit_code == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unknown_config_key_exits_2(runner, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("teacher_x:\n  bank_rate: 0.1\n")
    res = runner.invoke(main, ["train-teachers", str(p), "--out", str(tmp_path / "run")])
    assert res.exit_code == 2
    assert "teacher_x.bank_rate" in res.output


def test_run_failure_exits_3(runner, tmp_path):
    p = tmp_path / "diverge.yaml"
    p.write_text(dump_config(small_config(teacher_m={"lr": 1e30})))
    res = runner.invoke(main, ["train-teachers", str(p), "--out", str(tmp_path / "run")])
    assert res.exit_code == 3
    assert "non-finite loss" in res.output


def test_trend_failure_exits_4(runner, tmp_path, monkeypatch):
    bundle = ReportBundle("table2", [{"trial": "x"}], {}, [TrendCheck("student order", False, "0.5 < 0.6")])
    monkeypatch.setattr(reproduce_mod, "run_experiment", lambda *a, **k: bundle)
    res = runner.invoke(main, ["reproduce", "table2", "--out", str(tmp_path / "rep")])
    assert res.exit_code == 4
    assert "student order" in res.output


def test_phase_commands_chain(runner, cfg_file, tmp_path):
    out = str(tmp_path / "run")
    for cmd in (["train-teachers"], ["train-teacher-x"], ["distill"]):
        res = runner.invoke(main, cmd + [str(cfg_file), "--out", out])
        assert res.exit_code == 0, res.output
        assert 0 <= json.loads(res.output.strip().splitlines()[-1])["val_acc" if cmd[0] != "train-teachers" else "val_acc_ensemble"] <= 1
    echoed = json.loads((tmp_path / "run" / "records" / "student.json").read_text())["config"]
    assert echoed["dataset"]["num_classes"] == 4
    res = runner.invoke(main, ["attribute", "--checkpoint", out, "--n-steps", "16", "--max-samples", "10", "--out", str(tmp_path / "rep.json")])
    assert res.exit_code == 0, res.output
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["n_samples"] == 10 and abs(rep["image_share"] + rep["text_share"] - 1) < 1e-9


def test_sweep_writes_table_and_series(runner, cfg_file, tmp_path):
    out = tmp_path / "sweep"
    res = runner.invoke(main, ["sweep", str(cfg_file), "--axis", "noise", "--points", "0,100", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "table.csv").read_text().count("\n") == 3
    assert len((out / "series_mx.tsv").read_text().splitlines()) == 2


def test_lexicon_and_relax(runner, tmp_path):
    cat = tmp_path / "cat.txt"
    cat.write_text("telephone\ndog\ncat\n")
    res = runner.invoke(main, ["lexicon", "--catalog", str(cat), "--per-class-limit", "3"])
    assert res.exit_code == 0, res.output
    nouns = [ln.split("\t")[0] for ln in res.output.strip().splitlines()[1:]]
    assert "handset" in nouns
    assert not {"telephone", "dog", "cat"} & set(nouns)
    res = runner.invoke(main, ["relax", "--catalog", str(cat), "--M", "3", "--top-k", "2", "--out", str(tmp_path / "bank")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "bank" / "selection.tsv").exists()


def test_embed(runner, tmp_path):
    res = runner.invoke(main, ["embed", "--text", "a photo of a dog", "--cache-dir", str(tmp_path / "c"), "--out", str(tmp_path / "e")])
    assert res.exit_code == 0, res.output


def test_reproduce_small_table2(runner, cfg_file, tmp_path):
    res = runner.invoke(main, ["reproduce", "table2", "--config", str(cfg_file), "--seeds", "0", "--out", str(tmp_path / "rep")])
    assert res.exit_code in (0, 4), res.output
    rows = (tmp_path / "rep" / "table2.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 9
    assert (tmp_path / "rep" / "table2_wn.tsv").exists()
