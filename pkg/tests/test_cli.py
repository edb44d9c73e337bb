import csv
import json

import numpy as np
import pytest

from pta.cli import main, parse_seeds
from pta.errors import ConfigError

CONFIG = {
    "data": {"n_samples": 200, "latent_dim": 4, "label_dim": 2},
    "train": {"epochs": 1, "d_f": 8, "d_z": 4, "enc_hidden": 8, "head_hidden": 8, "T": 10},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3,1") == [3, 1]
    with pytest.raises(ConfigError):
        parse_seeds("4..0")


def test_data_gen_and_train_from_dir(tmp_path, config, capsys):
    assert main(["data", "gen", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert manifest["n"] == 200 and (tmp_path / "data" / "train.f32").exists()
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "data"), "--seed", "1",
                 "--out", str(tmp_path / "run")]) == 0
    for name in ("log.csv", "weights.csv", "checkpoint.ptc", "model.f32", "metrics.csv"):
        assert (tmp_path / "run" / name).exists(), name
    with open(tmp_path / "run" / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 7
    assert "seed 1" in capsys.readouterr().out


def test_train_resume_matches_uninterrupted(tmp_path, config):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "whole")]) == 0
    assert main(["train", "--config", str(config), "--max-steps", "4", "--out", str(tmp_path / "part")]) == 0
    assert main(["train", "--config", str(config), "--resume", str(tmp_path / "part" / "checkpoint.ptc"),
                 "--out", str(tmp_path / "part")]) == 0
    assert (tmp_path / "part" / "log.csv").read_text() == (tmp_path / "whole" / "log.csv").read_text()
    # a finished run has nothing left to do
    assert main(["train", "--config", str(config), "--resume", str(tmp_path / "whole" / "checkpoint.ptc"),
                 "--out", str(tmp_path / "again")]) == 2


def test_ablate_report_plot(tmp_path, config):
    runs, report = tmp_path / "abl", tmp_path / "report"
    assert main(["ablate", "--config", str(config), "--seeds", "0..1", "--out", str(runs)]) == 0
    assert len(list(runs.glob("*/metrics.csv"))) == 6
    assert main(["report", "--runs", str(runs), "--format", "csv", "--out", str(report)]) == 0
    with open(report / "table.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 7 * 2
    assert (report / "summary.csv").exists()
    assert main(["report", "--runs", str(runs), "--format", "json", "--out", str(report)]) == 0
    assert len(json.loads((report / "table.json").read_text())) == 42
    assert main(["plot", "--report", str(report / "table.csv"), "--out", str(report / "figs")]) == 0
    figs = sorted(p.name for p in (report / "figs").iterdir())
    assert "bars_mean_euclidean_error.png" in figs
    assert "weights_full_s0.png" in figs and "weights_no_meta_s1.png" not in figs  # no outer steps there


def test_dump_latents(tmp_path, config):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "run")]) == 0
    out = tmp_path / "lat.f32"
    assert main(["dump-latents", "--checkpoint", str(tmp_path / "run" / "checkpoint.ptc"), "--config", str(config),
                 "--split", "val", "--mask", "m1,m3", "--limit", "10", "--out", str(out)]) == 0
    side = json.loads(out.with_suffix(".json").read_text())
    keys = [b["key"] for b in side["blocks"]]
    assert keys == ["z_T", "z_S.m1", "z_S.m3", "refined.m1", "refined.m3"]
    assert all(b["shape"] == [10, 4] for b in side["blocks"])
    raw = np.fromfile(out, dtype="<f4")
    assert raw.size == 5 * 40 and np.all(np.isfinite(raw))


def test_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["report", "--runs", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert "pta: error" in capsys.readouterr().err
