"""Variance-preserving noise schedule and the deterministic sampling step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DomainError

DEFAULT_DELTA = 1e-3


def _check_unit(t, name="t"):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise DomainError(f"{name} must lie in [0, 1], got {t}")
    return t_arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine VP schedule: alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2)."""

    kind: str = "cosine_vp"

    def __post_init__(self):
        if self.kind != "cosine_vp":
            raise ConfigError(f"unsupported schedule kind {self.kind!r}")

    def alpha(self, t):
        t = _check_unit(t)
        # cos(pi/2) is 6e-17 in floating point; pin the endpoint
        return np.where(t == 1.0, 0.0, np.cos(0.5 * np.pi * t))

    def sigma(self, t):
        t = _check_unit(t)
        return np.where(t == 0.0, 0.0, np.sin(0.5 * np.pi * t))

    def perturb(self, x0, t, eps):
        """Sample of p_t(x_t | x_0): ``alpha_t x0 + sigma_t eps``."""
        x0, eps = np.asarray(x0), np.asarray(eps)
        if x0.shape != eps.shape:
            raise ContractError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
        a, s = self.alpha(t), self.sigma(t)
        return (a * x0 + s * eps).astype(np.result_type(x0, eps), copy=False)

    def data_to_noise(self, x_t, x0_hat, t):
        s = self.sigma(t)
        if np.any(s == 0.0):
            raise DomainError("data_to_noise undefined at t=0 (sigma_0 = 0)")
        return (np.asarray(x_t) - self.alpha(t) * np.asarray(x0_hat)) / s

    def ode_step(self, s, t, x_s, eps_hat, *, allow_equal=False):
        """First-order probability-flow step from time s down to t (DDIM form)."""
        s_, t_ = float(_check_unit(s, "s")), float(_check_unit(t, "t"))
        if not (t_ < s_ or (allow_equal and t_ == s_)):
            raise ContractError(f"ode_step needs t < s, got s={s_}, t={t_}")
        a_s = float(self.alpha(s_))
        if a_s == 0.0:
            raise DomainError("ode_step from s with alpha_s = 0")
        x0_hat = (np.asarray(x_s) - float(self.sigma(s_)) * np.asarray(eps_hat)) / a_s
        return float(self.alpha(t_)) * x0_hat + float(self.sigma(t_)) * np.asarray(eps_hat)


def omega(kind: str, t):
    """Weight of the diffusion expectation in the multi-step sampler.

    ``"none"`` disables the diffusion term entirely (weight 0).
    """
    t = _check_unit(t)
    if kind == "t":
        return t
    if kind == "t_squared":
        return t * t
    if kind == "none":
        return np.zeros_like(t)
    raise ConfigError(f"unknown omega kind {kind!r}")
