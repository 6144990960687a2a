"""Command line entry point.

    lacuna <gen-data|train|impute|eval|verify|diag-masks> --config PATH
           [--out DIR] [--seed N] [--jobs N] [--deterministic]

Exit codes: 0 ok, 1 invalid config, 2 IO or generation failure,
3 training divergence or a failed verification.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import denoiser as dn
from . import pipeline as pl
from .errors import (ConfigError, EmptyMaskError, GenerationError, InfeasibleConditioningError,
                     TrainingDivergenceError)
from .evalkit import ablation_table, fingerprint, run_ablation
from .masks import PIXEL_LEVEL, MaskSpec, PartitionSpec, coverage_diagnostic
from .oracle import (GaussianModel, VerifierReport, verify_ensemble_decomposition, verify_variance_identity,
                     verify_weighted_optimum)
from .pdegen import read_dataset, read_field, write_dataset, write_field
from .training import TrainConfig, fit, output_gradient_moments

log = logging.getLogger("lacuna")

COMMANDS = ("gen-data", "train", "impute", "eval", "verify", "diag-masks")
SUITES = ("thm1", "thm2", "lemma1", "masks")
EXIT_CONFIG, EXIT_IO, EXIT_FAILED = 1, 2, 3


class _Failed(Exception):
    pass


def _setup_logging():
    level = os.environ.get("LACUNA_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _dataset(cfg):
    path = cfg["data"].get("dataset_dir")
    if path:
        if not os.path.isfile(os.path.join(path, "manifest.json")):
            raise FileNotFoundError(f"no dataset manifest under {path}")
        return read_dataset(path)
    log.info("no dataset_dir given; generating the dataset in memory")
    return pl.generate_dataset(cfg)


def _checkpoint(cfg, out):
    path = cfg["train"].get("checkpoint") or os.path.join(out, "model.ckpt")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args):
    ds = pl.generate_dataset(cfg, jobs=args.jobs)
    ds.manifest["config_fingerprint"] = fingerprint(cfg)
    out = os.path.join(args.out, "data")
    write_dataset(ds, out)
    print(f"wrote {len(ds)} samples of shape {tuple(ds.sample_shape)} to {out}; "
          f"observed fraction {ds.manifest['observed_fraction']:.4f}")


def cmd_train(cfg, args):
    ds = _dataset(cfg)
    mcfg, params, stats, metric_log = pl.train_model(
        cfg, ds, out_dir=args.out, log_fn=lambda row: log.info("step %(step)d loss %(loss).5g", row))
    _write_json(os.path.join(args.out, "train_stats.json"), {
        "config_fingerprint": fingerprint(cfg, ds.manifest),
        "steps": len(stats.losses),
        "final_loss": stats.losses[-1],
        "mean_update_frequency": float(stats.update_frequency.mean()),
        "param_count": dn.param_count(mcfg),
    })
    print(f"trained {len(stats.losses)} steps; final loss {stats.losses[-1]:.5g}; "
          f"checkpoint {os.path.join(args.out, 'model.ckpt')}")


def cmd_impute(cfg, args):
    ds = _dataset(cfg)
    ckpt = _checkpoint(cfg, args.out)
    mcfg, params, _ = dn.load_checkpoint(ckpt)
    _, idx = pl.split_indices(cfg, len(ds))
    if len(idx) == 0:
        idx = np.arange(len(ds))
    imputed = pl.impute_samples(cfg, mcfg, params, ds, idx)
    out = cfg["sample"].get("imputed_dir") or os.path.join(args.out, "imputed")
    os.makedirs(out, exist_ok=True)
    files = []
    for j, i in enumerate(idx):
        name = f"imputed_{int(i):06d}.pfld"
        write_field(os.path.join(out, name), imputed[j])
        files.append(name)
    s = cfg["sample"]
    _write_json(os.path.join(out, "impute.json"), {
        "K": s["K"], "seed": s["seed"], "method": s["method"], "omega": s["omega"], "steps": s["steps"],
        "delta": s["delta"], "indices": [int(i) for i in idx], "files": files, "checkpoint": ckpt,
        "config_fingerprint": fingerprint(cfg, ds.manifest),
    })
    print(f"imputed {len(idx)} samples (K={s['K']}, {s['method']}) into {out}")


def cmd_eval(cfg, args):
    ds = _dataset(cfg)
    ablation = cfg["eval"].get("ablation")
    if ablation:
        grid = [tuple(p) for p in ablation.get("partitions", [])] + list(ablation.get("omegas", [])) \
            + list(ablation.get("K", []))
        if not grid:
            raise ConfigError("eval.ablation needs at least one of partitions, omegas, K")
        reports = run_ablation(grid, cfg, pl.ablation_runner(ds), seeds=ablation.get("seeds", [0]))
        table = ablation_table(reports)
        with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
            fh.write(table)
        _write_json(os.path.join(args.out, "ablation.json"), [json.loads(r.to_json()) for r in reports])
        print(table, end="")
        return
    src = cfg["sample"].get("imputed_dir") or os.path.join(args.out, "imputed")
    with open(os.path.join(src, "impute.json")) as fh:
        side = json.load(fh)
    idx = side["indices"]
    imputed = np.stack([read_field(os.path.join(src, f)) for f in side["files"]])
    rep = pl.evaluate_samples(cfg, ds, idx, imputed)
    rep.write(os.path.join(args.out, "eval"))
    print(f"{rep.metric}: mean {rep.mean:.6g} over {len(rep.values)} samples")


def _training_signal_reports(cfg, rng):

    v = cfg["eval"].get("verify", {})
    n = v.get("n_samples", 100_000)
    steps = v.get("steps", 10_000)
    reports = []
    x_obs = rng.normal(size=(1, 4, 4))
    x_hat = x_obs + rng.normal(size=x_obs.shape)
    C = (x_hat - x_obs) ** 2
    for q in (0.1, 0.5, 0.9):
        g2, _ = output_gradient_moments(x_hat, x_obs, np.ones_like(x_obs), PartitionSpec(PIXEL_LEVEL, 0.5, q), n, rng)
        rel = float(np.max(np.abs(g2 - 4 * q * C) / (4 * q * C)))
        reports.append(VerifierReport(f"sq_grad_scaling_p{q}", float(g2.sum()), float((4 * q * C).sum()),
                                      float("nan"), rel, 0.05, rel < 0.05))
    q = 0.7
    mcfg = dn.DenoiserConfig(field_channels=1, hidden_channels=4, n_blocks=1, time_embed_dim=4, time_hidden=8,
                             dtype="float64")
    tcfg = TrainConfig(PartitionSpec(PIXEL_LEVEL, 0.5, q), batch_size=1, steps=steps, learning_rate=0.0)
    x = rng.normal(size=(1, 1, 4, 4)) + 3.0
    _, stats, _ = fit(mcfg, x, np.ones_like(x), tcfg, rng=rng)
    sigma = np.sqrt(q * (1 - q) / stats.n_seen)
    worst = float(np.max(np.abs(stats.update_frequency - q)))
    reports.append(VerifierReport("update_frequency", float(stats.update_frequency.mean()), q, sigma,
                                  worst / sigma, 3.0, worst < 3 * sigma, {"steps": steps}))
    return reports


def _ensemble_reports(cfg, rng):

    v = cfg["eval"].get("verify", {})
    model = GaussianModel.ring(4)
    rep = verify_variance_identity(model, MaskSpec.pixel_iid(0.75), PartitionSpec(PIXEL_LEVEL, 0.5, 1.0), 0.2,
                                   v.get("n_mc", 100_000), rng)
    bias = np.array([0.05, -0.1, 0.0, 0.1])
    ens, _ = verify_ensemble_decomposition(model, lambda ctx: bias * (1 + ctx.sum()), 0.05,
                                           [1, 2, 4, 8, 16, 64], v.get("n_trials", 20_000), rng)
    return [rep] + ens


def _masks_reports(cfg, rng):

    v = cfg["eval"].get("verify", {})
    mask_spec = pl.mask_spec_of(cfg)
    part = pl.partition_of(cfg, mask_spec)
    cov = coverage_diagnostic(mask_spec, part, tuple(cfg["data"]["grid"]), v.get("n_samples", 100_000), rng)
    zd = [list(z) for z in cov.zero_dims]
    return [VerifierReport("query_coverage", cov.min_prob, 0.0, float("nan"), float("nan"), 0.0, cov.compliant,
                           {"zero_dims": zd, "uniformity": cov.uniformity})]


def cmd_verify(cfg, args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.suite == "thm1":
        reports = _training_signal_reports(cfg, rng)
    elif args.suite == "thm2":
        reports = _ensemble_reports(cfg, rng)
    elif args.suite == "lemma1":
        reports = [verify_weighted_optimum()]
    else:
        try:
            reports = _masks_reports(cfg, rng)
        except InfeasibleConditioningError as exc:
            raise _Failed(f"FAIL query_coverage: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, f"verify_{args.suite}.json"),
                {"config_fingerprint": fingerprint(cfg), "reports": [r.to_dict() for r in reports]})
    for r in reports:
        print(r.line())
        if "zero_dims" in r.details and r.details["zero_dims"]:
            print(f"  zero_dims ({len(r.details['zero_dims'])}): {r.details['zero_dims']}")
    if not all(r.passed for r in reports):
        raise _Failed(f"{sum(not r.passed for r in reports)} check(s) failed")


def cmd_diag_masks(cfg, args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    mask_spec = pl.mask_spec_of(cfg)
    part = pl.partition_of(cfg, mask_spec)
    n = cfg["eval"].get("verify", {}).get("n_samples", 100_000)
    rep = coverage_diagnostic(mask_spec, part, tuple(cfg["data"]["grid"]), n, rng)
    d = rep.to_dict()
    d["compliant"] = rep.compliant
    d["config_fingerprint"] = fingerprint(cfg)
    _write_json(os.path.join(args.out, "diag_masks.json"), d)
    print(f"min_prob {rep.min_prob:.4g} max_prob {rep.max_prob:.4g} uniformity {rep.uniformity:.4g} "
          f"zero_dims {len(rep.zero_dims)} compliant {rep.compliant}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "impute": cmd_impute, "eval": cmd_eval,
            "verify": cmd_verify, "diag-masks": cmd_diag_masks}


def build_parser():
    p = argparse.ArgumentParser(prog="lacuna", description="Diffusion imputation for incomplete fields.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("suite", nargs="?", choices=SUITES, help="verifier battery (verify only)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="lacuna_out")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    return p


def _apply_seed(cfg, command, seed):
    cfg = copy.deepcopy(cfg)
    if seed is None:
        return cfg
    if seed < 0 or seed >= 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    section = {"gen-data": "data", "train": "train", "impute": "sample"}.get(command)
    if section:
        cfg[section]["seed"] = seed
    return cfg


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify" and args.suite is None:
            raise ConfigError(f"verify needs a suite: one of {', '.join(SUITES)}")
        if args.command != "verify" and args.suite is not None:
            raise ConfigError(f"unexpected argument {args.suite!r}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _apply_seed(pl.load_config(args.config), args.command, args.seed)
        if args.deterministic:
            # every stage is seed-driven already; this also rules out worker pools
            args.jobs = 1
        os.makedirs(args.out, exist_ok=True)
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, _Failed) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, GenerationError, EmptyMaskError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
