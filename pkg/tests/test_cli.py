import json
import os

import numpy as np
import pytest

from lacuna import pipeline as pl
from lacuna.cli import main
from lacuna.errors import ConfigError
from lacuna.pdegen import read_dataset

SMALL = {
    "data": {"system": "advection", "grid": [8, 8], "frames": 2, "n_samples": 10, "n_test": 2, "seed": 3},
    "masks": {"kind": "pixel_iid", "rate": 0.7},
    "partition": {"ctx_ratio": 0.7, "qry_ratio": 0.7},
    "model": {"hidden_channels": 4, "n_blocks": 1, "time_embed_dim": 4, "time_hidden": 8},
    "train": {"batch_size": 4, "steps": 6, "log_every": 2},
    "sample": {"K": 3, "seed": 9},
    "eval": {"verify": {"n_samples": 2000}},
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_schema_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="masks"):
        pl.with_defaults({"masks": {"kind": "pixel_iid", "rte": 0.5}})
    with pytest.raises(ConfigError):
        pl.with_defaults({"extra": {}})
    cfg = pl.with_defaults({})
    assert set(cfg) == {"data", "masks", "partition", "model", "train", "sample", "eval"}


def test_gen_data_writes_manifest_and_is_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert "10 samples" in capsys.readouterr().out
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    man = json.loads((tmp_path / "a/data/manifest.json").read_text())
    assert len(man["files"]) == man["n_samples"] == 10
    assert "config_fingerprint" in man
    for name in sorted(os.listdir(tmp_path / "a/data")):
        assert (tmp_path / "a/data" / name).read_bytes() == (tmp_path / "b/data" / name).read_bytes()


def test_cfl_violation_exits_1(tmp_path, capsys):
    doc = {"data": {"system": "shallow_water", "grid": [32, 32], "dt": 0.5}}
    assert main(["gen-data", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path)]) == 1
    assert "CFL" in capsys.readouterr().err


def test_invalid_config_and_missing_inputs(tmp_path):
    bad = write_cfg(tmp_path, {"model": {"hidden_channels": 0}})
    assert main(["train", "--config", bad, "--out", str(tmp_path)]) == 1
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["train", "--config", str(broken), "--out", str(tmp_path)]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["impute", "--config", cfg, "--out", str(tmp_path / "empty")]) == 2
    assert main(["verify", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_train_impute_eval_roundtrip(tmp_path):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", write_cfg(tmp_path, SMALL), "--out", str(out)]) == 0
    doc = json.loads(json.dumps(SMALL))
    doc["data"]["dataset_dir"] = str(out / "data")
    cfg = write_cfg(tmp_path, doc, "run.json")
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "model.ckpt").is_file()
    assert (out / "train_log.csv").read_text().startswith("step,loss,lr,wallclock_ms")
    assert main(["impute", "--config", cfg, "--out", str(out)]) == 0
    side = json.loads((out / "imputed/impute.json").read_text())
    assert side["K"] == 3 and side["seed"] == 9 and side["indices"] == [8, 9]
    ds = read_dataset(str(out / "data"))
    from lacuna.pdegen import read_field
    for i, f in zip(side["indices"], side["files"]):
        x = read_field(str(out / "imputed" / f))
        assert np.array_equal(x[ds.masks[i] == 1], ds.obs[i][ds.masks[i] == 1])
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    first = (out / "eval.csv").read_bytes()
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "eval.csv").read_bytes() == first
    report = json.loads((out / "eval.json").read_text())
    assert report["n"] == 2 and report["fingerprint"]


def test_seed_flag_changes_training(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    for seed in (1, 2):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / f"s{seed}"), "--seed", str(seed)]) == 0
    assert (tmp_path / "s1/model.ckpt").read_bytes() != (tmp_path / "s2/model.ckpt").read_bytes()


def test_verify_lemma1_passes(tmp_path, capsys):
    assert main(["verify", "lemma1", "--config", write_cfg(tmp_path, SMALL), "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_masks_block_scenarios(tmp_path, capsys):
    good = dict(SMALL, data={"grid": [12, 12]}, masks={"kind": "block_grid", "grid": [3, 3], "observed_blocks": 5})
    assert main(["verify", "masks", "--config", write_cfg(tmp_path, good), "--out", str(tmp_path)]) == 0
    bad = dict(good, partition={"strategy": "pixel_level", "ctx_ratio": 0.5, "qry_ratio": 0.5})
    assert main(["verify", "masks", "--config", write_cfg(tmp_path, bad), "--out", str(tmp_path)]) == 3
    out = capsys.readouterr().out
    assert "FAIL query_coverage" in out and "zero_dims" in out


def test_diag_masks_writes_report(tmp_path):
    assert main(["diag-masks", "--config", write_cfg(tmp_path, SMALL), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "diag_masks.json").read_text())
    assert rep["compliant"] and rep["zero_dims"] == []


def test_verify_ensemble_suite_passes(tmp_path, capsys):
    assert main(["verify", "thm2", "--config", write_cfg(tmp_path, SMALL), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    rep = json.loads((tmp_path / "verify_thm2.json").read_text())
    assert rep["config_fingerprint"] and len(rep["reports"]) == 3


def test_verify_training_signal_suite(tmp_path, capsys):
    doc = dict(SMALL, eval={"verify": {"n_samples": 20_000, "steps": 2000}})
    assert main(["verify", "thm1", "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.count("PASS") == 4


@pytest.mark.parametrize("name", sorted(os.listdir(os.path.join(os.path.dirname(__file__), "..", "configs"))))
def test_shipped_configs_validate(name):
    cfg = pl.load_config(os.path.join(os.path.dirname(__file__), "..", "configs", name))
    pl.pde_config_of(cfg)
    pl.partition_of(cfg)
