"""Run configuration and the generate -> train -> impute -> evaluate pipeline.

A run config is one JSON document with sections data, masks, partition,
model, train, sample and eval.  It is validated against a strict schema
(unknown keys are errors) and missing fields take the defaults below.
"""
from __future__ import annotations

import copy
import json
import logging
import os

import jsonschema
import numpy as np

from . import denoiser as dn
from .errors import ConfigError
from .evalkit import EvalReport, advection_forward_mse, fingerprint, mse, shallow_water_residual
from .masks import BLOCK_GRID, PIXEL_IID, MaskSpec, PartitionSpec
from .pdegen import IncompleteDataset, PdeConfig, build_incomplete_dataset, generate, sample_rng
from .sampling import SamplerConfig, multi_step_impute, single_step_impute
from .schedule import NoiseSchedule
from .training import TrainConfig, fit, fold_frames

log = logging.getLogger("lacuna")

DEFAULTS = {
    "data": {"system": "advection", "grid": [16, 16], "frames": 8, "dt": 0.05, "params": {},
             "n_samples": 512, "seed": 0, "n_test": 64},
    "masks": {"kind": PIXEL_IID, "rate": 0.6, "site_ndim": 2},
    "partition": {"ctx_ratio": 0.7, "qry_ratio": 0.7},
    "model": {"hidden_channels": 32, "n_blocks": 2, "kernel": 3, "time_embed_dim": 32, "time_hidden": 64,
              "padding": "periodic", "dtype": "float32"},
    "train": {"batch_size": 16, "steps": 1500, "learning_rate": 1e-3, "adam_betas": [0.9, 0.999],
              "lr_schedule": "cosine", "seed": 0, "log_every": 50, "checkpoint_every": 0},
    "sample": {"method": "single_step", "K": 16, "delta": 1e-3, "steps": 200, "omega": "t", "seed": 0,
               "member_batch": 64},
    "eval": {"metric": "mse", "region": "unobserved"},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_ratio = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_pos_int = {"type": "integer", "minimum": 1}
_path = {"type": "string"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "data": _obj({
        "system": {"enum": ["advection", "shallow_water", "navier_stokes"]},
        "grid": {"type": "array", "items": _pos_int, "minItems": 1, "maxItems": 2},
        "frames": _pos_int, "dt": {"type": "number", "exclusiveMinimum": 0},
        "params": {"type": "object"},
        "n_samples": _pos_int, "seed": {"type": "integer", "minimum": 0}, "n_test": {"type": "integer", "minimum": 0},
        "dataset_dir": _path,
    }),
    "masks": _obj({
        "kind": {"enum": [PIXEL_IID, BLOCK_GRID]}, "rate": _ratio,
        "grid": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
        "observed_blocks": _pos_int, "site_ndim": {"type": ["integer", "null"], "minimum": 1},
    }),
    "partition": _obj({"strategy": {"enum": ["pixel_level", "block_level"]}, "ctx_ratio": _ratio,
                       "qry_ratio": _ratio}),
    "model": _obj({
        "hidden_channels": _pos_int, "n_blocks": _pos_int,
        "kernel": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2}]},
        "time_embed_dim": _pos_int, "time_hidden": _pos_int, "padding": {"enum": ["periodic", "zero"]},
        "dtype": {"enum": ["float32", "float64"]},
    }),
    "train": _obj({
        "batch_size": _pos_int, "steps": _pos_int, "learning_rate": {"type": "number", "minimum": 0},
        "adam_betas": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "lr_schedule": {"enum": ["constant", "cosine"]}, "seed": {"type": "integer", "minimum": 0},
        "log_every": _pos_int, "checkpoint_every": {"type": "integer", "minimum": 0}, "checkpoint": _path,
    }),
    "sample": _obj({
        "method": {"enum": ["single_step", "multi_step"]}, "K": _pos_int, "delta": {"type": "number",
                                                                                   "exclusiveMinimum": 0},
        "steps": _pos_int, "omega": {"enum": ["t", "t_squared", "none"]}, "seed": {"type": "integer", "minimum": 0},
        "member_batch": _pos_int, "imputed_dir": _path,
    }),
    "eval": _obj({
        "metric": {"enum": ["mse", "shallow_water_residual", "advection_forward_mse"]},
        "region": {"enum": ["unobserved", "all"]},
        "ablation": _obj({
            "partitions": {"type": "array", "items": {"type": "array", "items": _ratio, "minItems": 2,
                                                      "maxItems": 2}},
            "omegas": {"type": "array", "items": {"enum": ["t", "t_squared", "none"]}},
            "K": {"type": "array", "items": _pos_int},
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        }),
        "verify": _obj({"n_mc": _pos_int, "n_samples": _pos_int, "steps": _pos_int, "n_trials": _pos_int}),
    }),
})


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def with_defaults(doc):
    validate(doc)
    out = copy.deepcopy(DEFAULTS)
    for section, values in doc.items():
        out[section].update(copy.deepcopy(values))
    if out["masks"]["kind"] == BLOCK_GRID:
        out["masks"].pop("rate", None)
        out["masks"].pop("site_ndim", None)
    return out


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return with_defaults(doc)


# ---------------------------------------------------------------------------
# builders


def mask_spec_of(cfg) -> MaskSpec:
    return MaskSpec.from_dict(cfg["masks"])


def partition_of(cfg, mask_spec=None) -> PartitionSpec:
    mask_spec = mask_spec or mask_spec_of(cfg)
    p = cfg["partition"]
    return PartitionSpec.matching(mask_spec, p["ctx_ratio"], p["qry_ratio"], p.get("strategy"))


def pde_config_of(cfg) -> PdeConfig:
    d = cfg["data"]
    return PdeConfig(d["system"], tuple(d["grid"]), d["frames"], d["dt"], d["params"], d["n_samples"], d["seed"])


def model_config_of(cfg, field_channels) -> dn.DenoiserConfig:
    return dn.DenoiserConfig(field_channels=field_channels, **cfg["model"])


def train_config_of(cfg, part_spec) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "checkpoint"}
    return TrainConfig(partition=part_spec, **t)


def sampler_config_of(cfg) -> SamplerConfig:
    s = {k: v for k, v in cfg["sample"].items() if k not in ("method", "imputed_dir")}
    return SamplerConfig(**s)


# ---------------------------------------------------------------------------
# stages


def generate_dataset(cfg, jobs=1) -> IncompleteDataset:
    pde = pde_config_of(cfg)
    fields, meta = generate(pde, jobs=jobs)
    rng = sample_rng(pde.seed, 0, stream=1)
    manifest = {"system": pde.system, "grid": list(pde.grid), "frames": pde.frames, "seed": pde.seed,
                "pde": pde.to_dict(), "sample_params": meta}
    return build_incomplete_dataset(fields, mask_spec_of(cfg), rng, manifest=manifest)


def split_indices(cfg, n):
    n_test = min(cfg["data"]["n_test"], n - 1) if n > 1 else 0
    return np.arange(n - n_test), np.arange(n - n_test, n)


def train_model(cfg, ds: IncompleteDataset, out_dir=None, seed=None, log_fn=None):
    train_idx, _ = split_indices(cfg, len(ds))
    mask_spec = mask_spec_of(cfg)
    part = partition_of(cfg, mask_spec)
    tcfg = train_config_of(cfg, part)
    if seed is not None:
        tcfg.seed = seed
    x = fold_frames(ds.normalized()[train_idx])
    M = fold_frames(ds.masks[train_idx])
    mcfg = model_config_of(cfg, x.shape[1])
    rng = np.random.default_rng(tcfg.seed)
    log_path = ckpt_dir = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        ckpt_dir = os.path.join(out_dir, "checkpoints")
    params, stats, metric_log = fit(mcfg, x, M, tcfg, NoiseSchedule(), rng, log_path=log_path,
                                    checkpoint_dir=ckpt_dir, log_fn=log_fn)
    if out_dir:
        dn.save_checkpoint(os.path.join(out_dir, "model.ckpt"), mcfg, params, "cosine_vp",
                           extra={"steps": tcfg.steps, "seed": tcfg.seed, "fingerprint": fingerprint(cfg, ds.manifest)})
    return mcfg, params, stats, metric_log


def impute_samples(cfg, mcfg, params, ds: IncompleteDataset, idx, seed=None):
    """Imputed fields (physical units, observed entries exact) for samples ``idx``."""
    mask_spec = mask_spec_of(cfg)
    part = partition_of(cfg, mask_spec)
    scfg = sampler_config_of(cfg)
    rng = np.random.default_rng(scfg.seed if seed is None else seed)
    model = dn.as_model(mcfg, params)
    shape = ds.sample_shape
    xn = fold_frames(ds.normalized()[idx])
    M = fold_frames(ds.masks[idx])
    out = np.empty((len(idx),) + tuple(shape))
    for j in range(len(idx)):
        if cfg["sample"]["method"] == "multi_step":
            xj = multi_step_impute(model, xn[j], M[j], part, mask_spec, scfg, rng=rng)
        else:
            xj = single_step_impute(model, xn[j], M[j], part, scfg, rng=rng)
        phys = ds.denormalize(xj.reshape(shape))
        # observed entries are copied bit-exactly from storage
        out[j] = np.where(ds.masks[idx[j]] == 1, ds.obs[idx[j]], phys)
    return out


def evaluate_samples(cfg, ds: IncompleteDataset, idx, imputed) -> EvalReport:
    if ds.truth is None:
        raise ConfigError("dataset has no ground truth to evaluate against")
    metric = cfg["eval"]["metric"]
    values = []
    for j, i in enumerate(idx):
        if metric == "mse":
            values.append(mse(imputed[j], ds.truth[i], cfg["eval"]["region"], ds.masks[i]))
        elif metric == "shallow_water_residual":
            p = ds.manifest["sample_params"][i]
            values.append(shallow_water_residual(imputed[j], p["f"], p["g"], p["H_depth"], p["dx"], p["dy"],
                                                 p["frame_dt"]))
        else:
            p = ds.manifest["sample_params"][i]
            pde = ds.manifest["pde"]
            values.append(advection_forward_mse(imputed[j][0], ds.truth[i], p["beta"], pde["dt"],
                                                pde["params"]["length"]))
    return EvalReport(metric, values, fingerprint=fingerprint(cfg, ds.manifest))


def run_once(cfg, ds, seed=0, log_fn=None):
    """Train on the training split and score imputations of the test split."""
    mcfg, params, _, _ = train_model(cfg, ds, seed=seed, log_fn=log_fn)
    _, test_idx = split_indices(cfg, len(ds))
    imputed = impute_samples(cfg, mcfg, params, ds, test_idx, seed=seed)
    return evaluate_samples(cfg, ds, test_idx, imputed).values


def ablation_runner(dataset):
    """Runner for :func:`lacuna.evalkit.run_ablation` over a fixed dataset.

    Cells are (ctx_ratio, qry_ratio) pairs, omega names, or ints (ensemble K).
    """
    def run(cell, base, seed):
        cfg = copy.deepcopy(base)
        if isinstance(cell, (tuple, list)):
            cfg["partition"]["ctx_ratio"], cfg["partition"]["qry_ratio"] = cell
        elif isinstance(cell, str):
            cfg["sample"]["omega"] = cell
            cfg["sample"]["method"] = "multi_step"
        else:
            cfg["sample"]["K"] = int(cell)
        return run_once(cfg, dataset, seed=seed)
    return run
