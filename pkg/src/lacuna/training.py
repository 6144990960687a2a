"""Masked diffusion training on incomplete samples.

Each step draws t ~ U(0, 1) and noise, perturbs the observed entries only,
splits the observation mask into a context mask (shown to the network) and a
query mask (where the loss is evaluated), and takes one Adam step on

    || M_qry * (x_theta(t, M_ctx * x_obs_t, M_ctx) - x_obs) ||^2

summed over entries and averaged over the batch.  Per-dimension statistics of
how often the loss actually touches each output entry are accumulated along
the way.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from . import tensorcore as tc
from .errors import ConfigError, ShapeError, TrainingDivergenceError
from .masks import PartitionSpec, sample_partition
from .schedule import NoiseSchedule


@dataclass
class TrainConfig:
    partition: PartitionSpec
    batch_size: int = 32
    steps: int = 1000
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    seed: int = 0
    determinism: bool = True
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        self.adam_betas = tuple(self.adam_betas)

    def lr_at(self, step):
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1 + np.cos(np.pi * step / self.steps))
        return self.learning_rate


@dataclass
class TrainStats:
    """Per-dimension counters over every (sample, entry) seen in training.

    ``update_count[i]`` counts sample-steps where the loss gradient with respect
    to output entry i was non-zero; ``sq_grad_sum[i]`` accumulates that
    gradient squared (per sample, i.e. without the batch-mean factor).
    """

    shape: tuple
    losses: list = field(default_factory=list)
    update_count: np.ndarray = None
    query_count: np.ndarray = None
    sq_grad_sum: np.ndarray = None
    n_seen: int = 0

    def __post_init__(self):
        for name in ("update_count", "query_count", "sq_grad_sum"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.shape))

    def add(self, delta):
        self.update_count += delta["updated"].sum(axis=0)
        self.query_count += delta["queried"].sum(axis=0)
        self.sq_grad_sum += delta["sq_grad"].sum(axis=0)
        self.n_seen += delta["updated"].shape[0]
        self.losses.append(delta["loss"])

    @property
    def update_frequency(self):
        return self.update_count / max(self.n_seen, 1)


def masked_loss(x_hat, x_obs, M_qry) -> float:
    """Sum of squared errors over queried entries."""
    x_hat, x_obs, M_qry = np.asarray(x_hat), np.asarray(x_obs), np.asarray(M_qry)
    if x_hat.shape != x_obs.shape or x_obs.shape != M_qry.shape:
        raise ShapeError(f"masked_loss shapes differ: {x_hat.shape}, {x_obs.shape}, {M_qry.shape}")
    r = M_qry * (x_hat - x_obs)
    return float((r * r).sum())


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr=None) -> dict:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if lr == 0:
                out[k] = p
                continue
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (p - upd).astype(p.dtype)
        return out


def perturb_observed(x_obs, M, t, eps, schedule: NoiseSchedule):
    """M * (alpha_t x_obs + sigma_t eps) with one t per sample."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (x_obs.ndim - 1))
    return M * (schedule.alpha(t) * x_obs + schedule.sigma(t) * eps)


def draw_partitions(M, part_spec, rng):
    ctx = np.empty_like(M)
    qry = np.empty_like(M)
    for b in range(M.shape[0]):
        c, q = sample_partition(M[b], part_spec, rng)
        ctx[b], qry[b] = c, q
    return ctx, qry


def loss_and_grads(model_cfg, params, t, x_obs, M_ctx, M_qry, x_in):
    """Batch-mean masked loss, parameter gradients and the output gradient."""
    ptens = {k: tc.parameter(v) for k, v in params.items()}
    x_hat = dn.apply(model_cfg, ptens, t, x_in, M_ctx)
    dt = x_hat.dtype
    resid = (x_hat - tc.as_tensor(x_obs.astype(dt))) * tc.as_tensor(M_qry.astype(dt))
    B = x_obs.shape[0]
    loss = tc.sum(tc.square(resid)) * (1.0 / B)
    names = list(ptens)
    grads = tc.backward(loss, [x_hat] + [ptens[k] for k in names])
    return float(loss.data), dict(zip(names, grads[1:])), grads[0] * B, x_hat.data


def train_step(model_cfg, params, opt: Adam, x_obs, M, config: TrainConfig, schedule: NoiseSchedule, rng,
               lr=None):
    """One optimisation step on a batch of (x_obs, M), each (B, F, H, W).

    Returns (params', loss, stats_delta).
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    M = np.asarray(M)
    if not M.reshape(M.shape[0], -1).any(axis=1).all():
        raise ConfigError("every sample in the batch needs a non-empty mask")
    B = x_obs.shape[0]
    t = rng.random(B)
    eps = rng.standard_normal(x_obs.shape)
    x_t = perturb_observed(x_obs, M, t, eps, schedule)
    M_ctx, M_qry = draw_partitions(M, config.partition, rng)
    loss, grads, g_out, _ = loss_and_grads(model_cfg, params, t, x_obs, M_ctx, M_qry, M_ctx * x_t)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(
            f"non-finite loss {loss}",
            diagnostics={"t": t.tolist(), "max_abs_input": float(np.abs(x_t).max())},
        )
    params = opt.step(params, grads, lr=lr)
    g_out = g_out.astype(np.float64)
    delta = {
        "loss": loss,
        "updated": (g_out != 0).astype(np.float64),
        "queried": M_qry.astype(np.float64),
        "sq_grad": g_out * g_out,
    }
    return params, loss, delta


def output_gradient_moments(x_hat, x_obs, M, part_spec: PartitionSpec, n_resamples, rng, chunk=10_000):
    """Mean squared loss-gradient per output entry under resampled query masks.

    ``x_hat`` is held fixed (frozen parameters, fixed t, noise and context);
    only M_qry is redrawn through the partitioner.  Gradients come from the
    tape of the masked loss.  Returns (mean_sq_grad, query_frequency).
    """
    x_hat, x_obs, M = (np.asarray(a, dtype=np.float64) for a in (x_hat, x_obs, M))
    acc = np.zeros(x_hat.shape)
    freq = np.zeros(x_hat.shape)
    done = 0
    while done < n_resamples:
        n = min(chunk, n_resamples - done)
        Mb = np.broadcast_to(M, (n,) + M.shape)
        _, qry = draw_partitions(Mb, part_spec, rng)
        xh = tc.parameter(np.broadcast_to(x_hat, qry.shape).copy())
        resid = (xh - tc.as_tensor(np.broadcast_to(x_obs, qry.shape).copy())) * tc.as_tensor(qry.astype(np.float64))
        (g,) = tc.backward(tc.sum(tc.square(resid)), [xh])
        acc += (g * g).sum(axis=0)
        freq += qry.sum(axis=0)
        done += n
    return acc / n_resamples, freq / n_resamples


def fold_frames(x):
    """(N, T, C, H, W) -> (N, T*C, H, W); arrays already 4-D pass through."""
    x = np.asarray(x)
    if x.ndim == 5:
        return x.reshape(x.shape[0], x.shape[1] * x.shape[2], *x.shape[3:])
    if x.ndim != 4:
        raise ShapeError(f"expected (N, T, C, H, W) or (N, F, H, W), got {x.shape}")
    return x


def fit(model_cfg, x_obs, M, config: TrainConfig, schedule: NoiseSchedule = None, rng=None, params=None,
        log_path=None, checkpoint_dir=None, log_fn=None):
    """Run ``config.steps`` Adam steps over shuffled minibatches.

    ``x_obs`` and ``M`` are (N, F, H, W) (normalised values, zero where
    unobserved).  Returns (params, TrainStats, metric_log).
    """
    schedule = schedule or NoiseSchedule()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x_obs, M = fold_frames(x_obs), fold_frames(M)
    N = x_obs.shape[0]
    if N == 0:
        raise ConfigError("empty dataset")
    if not M.reshape(N, -1).any(axis=1).all():
        raise ConfigError("dataset contains samples with empty masks")
    if params is None:
        params = dn.init(model_cfg, rng)
    opt = Adam(params, config.learning_rate, config.adam_betas, config.adam_eps)
    stats = TrainStats(shape=x_obs.shape[1:])
    metric_log = []
    order = rng.permutation(N)
    pos = 0
    t0 = time.perf_counter()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "wallclock_ms"])
    try:
        for step in range(1, config.steps + 1):
            if pos + config.batch_size > N:
                order, pos = rng.permutation(N), 0
            idx = order[pos:pos + config.batch_size]
            pos += config.batch_size
            lr = config.lr_at(step - 1)
            params, loss, delta = train_step(model_cfg, params, opt, x_obs[idx], M[idx], config, schedule, rng, lr=lr)
            stats.add(delta)
            if step % config.log_every == 0 or step == config.steps:
                row = {"step": step, "loss": loss, "lr": lr,
                       "wallclock_ms": int(1000 * (time.perf_counter() - t0))}
                metric_log.append(row)
                if writer:
                    writer.writerow([row["step"], f"{loss:.8g}", f"{lr:.6g}", row["wallclock_ms"]])
                if log_fn:
                    log_fn(row)
            if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                os.makedirs(checkpoint_dir, exist_ok=True)
                dn.save_checkpoint(os.path.join(checkpoint_dir, f"step_{step:07d}.ckpt"), model_cfg, params,
                                   schedule.kind, extra={"step": step})
    finally:
        if fh:
            fh.close()
    return params, stats, metric_log


def ema(values, decay=0.98):
    out, acc = [], None
    for v in values:
        acc = v if acc is None else decay * acc + (1 - decay) * v
        out.append(acc)
    return np.array(out)
