import numpy as np
import pytest

from lacuna import pipeline as pl
from lacuna.errors import ConfigError
from lacuna.evalkit import run_ablation


def small(system="advection", **data):
    doc = {
        "data": {"system": system, "grid": [8, 8], "frames": 4, "n_samples": 8, "n_test": 2, **data},
        "masks": {"kind": "pixel_iid", "rate": 0.7},
        "model": {"hidden_channels": 4, "n_blocks": 1, "time_embed_dim": 4, "time_hidden": 8},
        "train": {"batch_size": 2, "steps": 3},
        "sample": {"K": 2},
    }
    return pl.with_defaults(doc)


def test_defaults_fill_missing_fields():
    cfg = pl.with_defaults({"masks": {"kind": "block_grid", "grid": [3, 3], "observed_blocks": 5}})
    assert "rate" not in cfg["masks"]
    assert pl.partition_of(cfg).strategy == "block_level"
    assert cfg["train"]["steps"] == pl.DEFAULTS["train"]["steps"]


def test_split_keeps_test_samples_out_of_training():
    cfg = small()
    train, test = pl.split_indices(cfg, 8)
    assert list(test) == [6, 7] and not set(train) & set(test)
    assert len(pl.split_indices(cfg, 1)[1]) == 0


def test_truth_scores_zero_and_observed_entries_survive():
    cfg = small()
    ds = pl.generate_dataset(cfg)
    mcfg, params, _, _ = pl.train_model(cfg, ds)
    _, idx = pl.split_indices(cfg, len(ds))
    imputed = pl.impute_samples(cfg, mcfg, params, ds, idx)
    for j, i in enumerate(idx):
        on = ds.masks[i] == 1
        assert np.array_equal(imputed[j][on], ds.obs[i][on])
    assert pl.evaluate_samples(cfg, ds, idx, ds.truth[idx]).values == [0.0, 0.0]


def test_physics_metrics_prefer_truth():
    cfg = small("shallow_water", dt=0.005)
    cfg["eval"]["metric"] = "shallow_water_residual"
    ds = pl.generate_dataset(cfg)
    _, idx = pl.split_indices(cfg, len(ds))
    noisy = ds.truth[idx] + 0.1 * np.random.default_rng(0).normal(size=ds.truth[idx].shape)
    truth_res = pl.evaluate_samples(cfg, ds, idx, ds.truth[idx]).mean
    assert truth_res < pl.evaluate_samples(cfg, ds, idx, noisy).mean

    cfg = small()
    cfg["eval"]["metric"] = "advection_forward_mse"
    ds = pl.generate_dataset(cfg)
    assert pl.evaluate_samples(cfg, ds, idx, ds.truth[idx]).mean < 1e-20


def test_missing_truth_is_a_config_error():
    cfg = small()
    ds = pl.generate_dataset(cfg)
    ds.truth = None
    with pytest.raises(ConfigError):
        pl.evaluate_samples(cfg, ds, [0], ds.obs[:1])


def test_ablation_runner_cells():
    cfg = small()
    ds = pl.generate_dataset(cfg)
    reports = run_ablation([(0.5, 0.5), 4, "t"], cfg, pl.ablation_runner(ds), seeds=(0, 1))
    assert [len(r.values) for r in reports] == [4, 4, 4]
    assert all(np.isfinite(r.mean) and r.std >= 0 for r in reports)
