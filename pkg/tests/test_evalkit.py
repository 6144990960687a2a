import json

import numpy as np
import pytest

from lacuna.errors import ConfigError, DomainError, InfeasibleError
from lacuna.evalkit import (
    EvalReport, adaptive_ctx_ratio, advection_forward_mse, mean_fill, mse, richardson_truncation, run_ablation,
    shallow_water_residual, shift_periodic,
)
from lacuna.pdegen import PdeConfig, advection_solution, gen_shallow_water


def test_mse_basics(rng):
    x = rng.standard_normal((2, 4, 4))
    m = (rng.random(x.shape) < 0.5).astype(np.uint8)
    assert mse(x, x, "unobserved", m) == 0
    y = x + 0.3 * (1 - m)
    assert mse(y, x, "unobserved", m) == pytest.approx(0.09)
    with pytest.raises(DomainError):
        mse(x, x, "unobserved", np.ones_like(m))
    with pytest.raises(ConfigError):
        mse(x, x, "unobserved")


def test_mse_denormalises(rng):
    x = rng.standard_normal((2, 3, 3))
    stats = {"mean": [1.0, -2.0], "std": [2.0, 0.5]}
    y = x + 0.1
    got = mse(y, x, "all", stats=stats)
    assert got == pytest.approx(np.mean((0.1 * np.array([2.0, 0.5]).reshape(-1, 1, 1)) ** 2 * np.ones(x.shape)))


def test_all_region_is_mask_weighted_average(rng):
    x = rng.standard_normal((3, 5, 5))
    y = rng.standard_normal((3, 5, 5))
    m = (rng.random(x.shape) < 0.4).astype(np.uint8)
    frac = 1 - m.mean()
    obs_part = np.mean((x - y)[m == 1] ** 2)
    assert mse(y, x, "all") == pytest.approx(frac * mse(y, x, "unobserved", m) + (1 - frac) * obs_part)


def test_mean_fill_on_standardised_gaussian():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20000, 1, 1, 8))
    m = (rng.random(x.shape) < 0.5).astype(np.uint8)
    filled = mean_fill(x * m, m)
    assert mse(filled, x, "unobserved", m) == pytest.approx(1.0, abs=0.02)


def _sw(dt, frame_every, frames=6):
    cfg = PdeConfig("shallow_water", (16, 16), frames=frames, dt=dt, n_samples=1, seed=2,
                    params={"frame_every": frame_every, "f": 1.0, "H_depth": 1.0})
    f, meta = gen_shallow_water(cfg)
    return f[0], meta[0]


def test_shallow_water_residual_within_richardson_bound():
    coarse, m = _sw(0.01, 4)
    fine, mf = _sw(0.01, 2, frames=11)
    args = (m["f"], m["g"], m["H_depth"], m["dx"], m["dy"])
    r_c = shallow_water_residual(coarse, *args, m["frame_dt"])
    r_f = shallow_water_residual(fine, *args, mf["frame_dt"])
    assert r_c <= 2 * richardson_truncation(r_c, r_f)


def test_shallow_water_residual_separates_noise():
    fields, m = _sw(0.01, 4)
    args = (m["f"], m["g"], m["H_depth"], m["dx"], m["dy"], m["frame_dt"])
    base = shallow_water_residual(fields, *args)
    noisy = fields.copy()
    noisy[:, 2] = np.random.default_rng(0).standard_normal(noisy[:, 2].shape) * fields[:, 2].std()
    assert shallow_water_residual(noisy, *args) > 1e3 * base


def test_shallow_water_residual_constant_field():
    fields = np.full((4, 3, 8, 8), 0.7)
    assert shallow_water_residual(fields, 0.0, 1.0, 1.0, 0.1, 0.1, 0.01) == 0.0
    with pytest.raises(ConfigError):
        shallow_water_residual(fields[:2], 0.0, 1.0, 1.0, 0.1, 0.1, 0.01)


def test_advection_forward_mse():
    modes = [(1.0, 2, 1, 0.3), (0.5, -1, 0, 1.0)]
    truth = advection_solution(modes, 0.7, np.arange(6) * 0.1, (8, 16))
    assert advection_forward_mse(truth[0], truth, 0.7, 0.1) < 1e-25
    # one cell per frame: shifting is an exact isometry even for white-noise errors
    truth = advection_solution(modes, 0.625, np.arange(6) * 0.1, (8, 16))
    e = np.random.default_rng(1).standard_normal(truth[0].shape) * 0.1
    per = np.mean(e**2)
    assert advection_forward_mse(truth[0] + e, truth, 0.625, 0.1) == pytest.approx(per, rel=1e-10)


def test_shift_integer_is_roll(rng):
    u = rng.standard_normal((3, 8))
    assert np.allclose(shift_periodic(u, 3), np.roll(u, 3, axis=-1), atol=1e-12)


def test_adaptive_ctx_ratio():
    assert adaptive_ctx_ratio(0.8, 0.5, 0.6) == pytest.approx(2 / 3)
    assert adaptive_ctx_ratio(0.6, 0.5, 0.6) == pytest.approx(0.5)
    with pytest.raises(InfeasibleError):
        adaptive_ctx_ratio(0.8, 0.5, 0.2)


def test_report_round_trip(tmp_path):
    r = EvalReport("mse", [0.1, 0.3], fingerprint="abc", seed_means=[0.1, 0.3])
    assert r.mean == pytest.approx(0.2) and r.std == pytest.approx(0.1)
    r.write(tmp_path / "rep")
    assert (tmp_path / "rep.csv").read_text().splitlines()[0] == "sample,mse"
    assert json.loads((tmp_path / "rep.json").read_text())["n"] == 2
    assert r.to_csv() == EvalReport("mse", [0.1, 0.3]).to_csv()


def test_ablation_continues_after_failure():
    def runner(cell, base, seed):
        if cell == (1.0, 1.0):
            raise RuntimeError("boom")
        return [cell[0] + seed, cell[1]]

    reps = run_ablation([(0.5, 0.5), (1.0, 1.0), (0.7, 0.7)], {"x": 1}, runner, seeds=(0, 1))
    assert len(reps) == 3
    assert np.isnan(reps[1].mean) and reps[1].values == []
    assert reps[2].mean == pytest.approx(np.mean([0.7, 0.7, 1.7, 0.7]))
    assert reps[0].fingerprint == reps[2].fingerprint
