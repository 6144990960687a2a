"""Imputation samplers.

``model`` is any callable ``model(t, masked_input, ctx_mask)`` taking a batch
(B, *field_shape) and returning clean-field estimates of the same shape; a
trained denoiser (:func:`lacuna.denoiser.as_model`) and the Gaussian oracle
(:func:`lacuna.oracle.gaussian_model_fn`) both fit.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, EmptyMaskError
from .masks import MaskSpec, PartitionSpec, sample_mask, sample_partition
from .oracle import fit_inverse_k
from .schedule import DEFAULT_DELTA, NoiseSchedule, omega

OMEGA_KINDS = ("t", "t_squared", "none")


@dataclass
class SamplerConfig:
    K: int = 16
    delta: float = DEFAULT_DELTA
    steps: int = 200
    omega: str = "t"
    seed: int = 0
    member_batch: int = 64

    def __post_init__(self):
        if self.K < 1 or self.steps < 1 or self.member_batch < 1:
            raise ConfigError("K, steps and member_batch must be >= 1")
        if not 0.0 < self.delta < 0.5:
            raise ConfigError(f"delta must be a small positive number, got {self.delta}")
        if self.omega not in OMEGA_KINDS:
            raise ConfigError(f"omega must be one of {OMEGA_KINDS}, got {self.omega!r}")

    def to_dict(self):
        return asdict(self)


def _check_mask(M):
    M = np.asarray(M)
    if not M.any():
        raise EmptyMaskError("observation mask is empty")
    return M


def splice(x_obs, M, x):
    """Observed entries from x_obs, the rest from x."""
    return np.where(np.asarray(M) == 1, x_obs, x)


def ensemble_members(model, t, x_t, M, part_spec: PartitionSpec, K, rng, member_batch=64):
    """K model outputs, each under an independent context mask drawn from M."""
    outs = []
    done = 0
    while done < K:
        n = min(member_batch, K - done)
        ctx = np.stack([sample_partition(M, part_spec, rng)[0] for _ in range(n)]).astype(x_t.dtype)
        outs.append(np.asarray(model(t, ctx * x_t[None], ctx), dtype=np.float64))
        done += n
    return np.concatenate(outs, axis=0)


def single_step_impute(model, x_obs, M, part_spec: PartitionSpec, config: SamplerConfig,
                       schedule: NoiseSchedule = None, rng=None, return_members=False):
    """Average K context-masked predictions at the small noise level delta.

    The noisy input is alpha_delta x_obs + sigma_delta eps (one eps shared by
    all members); observed entries of the result are copied from ``x_obs``.
    """
    schedule = schedule or NoiseSchedule()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    M = _check_mask(M)
    x_obs = np.asarray(x_obs, dtype=np.float64) * M
    d = config.delta
    x_d = M * (schedule.alpha(d) * x_obs + schedule.sigma(d) * rng.standard_normal(x_obs.shape))
    members = ensemble_members(model, d, x_d, M, part_spec, config.K, rng, config.member_batch)
    out = splice(x_obs, M, members.mean(axis=0))
    return (out, members) if return_members else out


def ensemble_mean_curve(model_fn, obs, part_spec: PartitionSpec, K_list, n_trials, rng, reference,
                        delta=DEFAULT_DELTA, schedule=None, region=None):
    """Mean squared error of the (unspliced) K-ensemble against ``reference``.

    ``obs`` is (x_obs, M); ``reference`` is E[x0 | obs] from an oracle.  Each
    trial draws a fresh noise realisation and K fresh context masks.  Returns
    a dict with the table rows and the least-squares fit err(K) = a + b/K.
    """
    schedule = schedule or NoiseSchedule()
    x_obs, M = obs
    M = _check_mask(M)
    x_obs = np.asarray(x_obs, dtype=np.float64) * M
    reference = np.asarray(reference, dtype=np.float64)
    sel = np.ones(x_obs.shape, bool) if region is None else np.asarray(region, bool)
    rows = []
    for K in K_list:
        errs = np.empty(n_trials)
        for i in range(n_trials):
            x_d = M * (schedule.alpha(delta) * x_obs + schedule.sigma(delta) * rng.standard_normal(x_obs.shape))
            avg = ensemble_members(model_fn, delta, x_d, M, part_spec, K, rng, member_batch=max(K, 1)).mean(axis=0)
            errs[i] = ((avg - reference)[sel] ** 2).sum()
        rows.append({"K": int(K), "mse": float(errs.mean()), "stderr": float(errs.std(ddof=1) / np.sqrt(n_trials))
                     if n_trials > 1 else float("nan")})
    a, b = fit_inverse_k([r["K"] for r in rows], [r["mse"] for r in rows])
    return {"rows": rows, "a": a, "b": b}


def time_grid(steps, delta):
    """Uniform grid from 1 - delta down to delta (steps intervals)."""
    return np.linspace(1.0 - delta, delta, steps + 1)


def multi_step_impute(model, x_obs, M, part_spec: PartitionSpec, mask_spec: MaskSpec, config: SamplerConfig,
                      schedule: NoiseSchedule = None, rng=None, imputation=None):
    """Deterministic ODE sampling steered towards the observations.

    The imputation expectation E[x0 | x_obs, M] is computed once with the
    single-step ensemble (or taken from ``imputation``).  At each step the
    diffusion expectation comes from one prediction under a fresh random
    context (a new mask from ``mask_spec`` passed through the partitioner),
    the two are blended with weight omega(s), and the implied noise on
    unobserved entries is combined with the noise implied by the observations
    before a deterministic step.  The last step goes from delta to 0 and the
    observed entries are spliced back in.
    """
    schedule = schedule or NoiseSchedule()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    M = _check_mask(M)
    x_obs = np.asarray(x_obs, dtype=np.float64) * M
    if imputation is None:
        imputation = single_step_impute(model, x_obs, M, part_spec, config, schedule, rng)
    imputation = np.asarray(imputation, dtype=np.float64)
    grid = np.append(time_grid(config.steps, config.delta), 0.0)
    x = rng.standard_normal(x_obs.shape)
    for s, t in zip(grid[:-1], grid[1:]):
        w = omega(config.omega, s)
        if w > 0:
            while True:
                m_rnd = sample_mask(mask_spec, x_obs.shape, rng)
                if m_rnd.any():
                    break
            ctx = sample_partition(m_rnd, part_spec, rng)[0].astype(np.float64)
            diffusion = np.asarray(model(s, (ctx * x)[None], ctx[None]), dtype=np.float64)[0]
            x_hat = w * diffusion + (1.0 - w) * imputation
        else:
            x_hat = imputation
        a_s, s_s = schedule.alpha(s), schedule.sigma(s)
        eps_unobs = (x - a_s * x_hat) / s_s
        eps_obs = (x - a_s * x_obs) / s_s
        eps = M * eps_obs + (1 - M) * eps_unobs
        x = schedule.ode_step(s, t, x, eps)
    return splice(x_obs, M, x)
