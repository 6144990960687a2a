"""Ground truths for the imputation theory: Gaussian posteriors under noisy
masked observation, the brute-force element-wise weighted-MSE optimum, and
Monte Carlo verifiers for the information-gap identity and the K-ensemble
error law.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigError, DomainError, NumericalError
from .masks import PIXEL_IID, PIXEL_LEVEL, MaskSpec, PartitionSpec, sample_mask, sample_partition
from .schedule import NoiseSchedule


@dataclass(frozen=True, eq=False)
class GaussianModel:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).ravel()
        S = np.asarray(self.sigma, dtype=np.float64)
        if S.shape != (mu.size, mu.size):
            raise ConfigError(f"sigma must be {mu.size}x{mu.size}, got {S.shape}")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ConfigError("sigma is not symmetric")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("sigma is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", S)

    @property
    def d(self):
        return self.mu.size

    def sample(self, n, rng):
        L = np.linalg.cholesky(self.sigma)
        return self.mu + rng.standard_normal((n, self.d)) @ L.T

    @classmethod
    def ring(cls, d, mean=1.0, variance=1.0, length=1.5, nugget=0.05):
        """Stationary covariance on a periodic 1-D lattice of d sites.

        Built as a circulant from a non-negative squared-exponential spectrum,
        so it is positive definite for every d.
        """
        k = np.fft.fftfreq(d) * d
        spec = np.exp(-0.5 * (2 * np.pi * k * length / d) ** 2)
        row = np.fft.ifft(spec).real
        row *= variance / row[0]
        i = np.arange(d)
        S = row[(i[None, :] - i[:, None]) % d] + nugget * np.eye(d)
        return cls(np.full(d, float(mean)), 0.5 * (S + S.T))


def _selection(S, d):
    # boolean arrays are masks, anything else lists indices
    S = np.asarray(S)
    idx = np.flatnonzero(S) if S.dtype == bool else S.astype(int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= d or np.unique(idx).size != idx.size):
        raise ConfigError(f"invalid index selection {idx}")
    return idx


def gaussian_posterior(model: GaussianModel, t, S, y, schedule: NoiseSchedule = None):
    """Mean and covariance of x0 given y = alpha_t x0[S] + sigma_t eps[S].

    ``S`` is a boolean mask over the d coordinates or an index array; ``y``
    holds the observed values in the order of ``S``'s indices (a length-d
    array is also accepted and read at the selected indices).  An empty
    selection returns the prior.
    """
    schedule = schedule or NoiseSchedule()
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t must be in [0, 1), got {t}")
    idx = _selection(S, model.d)
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == model.d and idx.size != model.d:
        y = y[idx]
    if y.size != idx.size:
        raise ConfigError(f"{y.size} observed values for {idx.size} selected indices")
    if idx.size == 0:
        return model.mu.copy(), model.sigma.copy()
    a, s = schedule.alpha(t), schedule.sigma(t)
    SigS = model.sigma[:, idx]                          # Sigma S^T
    inner = a * a * model.sigma[np.ix_(idx, idx)] + s * s * np.eye(idx.size)
    try:
        cf = linalg.cho_factor(inner)
    except linalg.LinAlgError as exc:
        raise NumericalError("observation covariance is singular") from exc
    mean = model.mu + a * SigS @ linalg.cho_solve(cf, y - a * model.mu[idx])
    cov = model.sigma - a * a * SigS @ linalg.cho_solve(cf, SigS.T)
    return mean, 0.5 * (cov + cov.T)


class PosteriorOperators:
    """Cached affine maps y_full -> E[x0 | noisy observation on pattern S].

    For each observed pattern the posterior mean is ``b + A @ y`` where ``y``
    is a full-length vector (values off the pattern are ignored) and the
    posterior covariance does not depend on y.
    """

    def __init__(self, model: GaussianModel, t, schedule: NoiseSchedule = None):
        self.model, self.t = model, t
        self.schedule = schedule or NoiseSchedule()
        self._cache = {}

    def get(self, pattern):
        pattern = np.asarray(pattern, dtype=bool).ravel()
        key = pattern.tobytes()
        if key not in self._cache:
            d = self.model.d
            idx = np.flatnonzero(pattern)
            b, cov = gaussian_posterior(self.model, self.t, idx, np.zeros(idx.size), self.schedule)
            A = np.zeros((d, d))
            for j, i in enumerate(idx):
                e = np.zeros(idx.size)
                e[j] = 1.0
                A[:, i] = gaussian_posterior(self.model, self.t, idx, e, self.schedule)[0] - b
            self._cache[key] = (A, b, cov)
        return self._cache[key]

    def means(self, patterns, ys):
        """Posterior means for rows of (n, d) patterns and (n, d) noisy values."""
        patterns = np.asarray(patterns, dtype=bool).reshape(len(ys), -1)
        ys = np.asarray(ys, dtype=np.float64).reshape(len(ys), -1)
        out = np.empty(ys.shape)
        keys = np.packbits(patterns, axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        for u in range(len(uniq)):
            rows = np.flatnonzero(inv == u)
            A, b, _ = self.get(patterns[rows[0]])
            out[rows] = b + ys[rows] @ A.T
        return out

    def trace_cov(self, pattern):
        return float(np.trace(self.get(pattern)[2]))


# ---------------------------------------------------------------------------
# element-wise weighted-MSE optimum by enumeration


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sup = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        p = np.asarray(self.probs, dtype=np.float64).ravel()
        if sup.shape[0] == 0 or sup.shape[0] != p.size:
            raise ConfigError("support and probs must be non-empty and of equal length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("probs must be a probability vector")
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", p)


def joint_table(model: DiscreteModel, z_dist, y_map):
    """Enumerate (prob, x, y, z) over X ~ model, Y = y_map(x), Z ~ z_dist(x, y).

    ``y_map(x)`` returns a hashable y, or a list of (prob, y) pairs for a
    random observation; ``z_dist(x, y)`` returns a list of (prob, z vector).
    """
    rows = []
    for px, x in zip(model.probs, model.support):
        ys = y_map(x)
        if not isinstance(ys, list):
            ys = [(1.0, ys)]
        for py, y in ys:
            for pz, z in z_dist(x, y):
                p = px * py * pz
                if p > 0:
                    rows.append((p, x, y, np.asarray(z, dtype=np.float64)))
    return rows


@dataclass
class WeightedOptimum:
    values: dict
    arbitrary: dict

    def __call__(self, y):
        return self.values[y]


def lemma1_optimum(model: DiscreteModel, z_dist, y_map) -> WeightedOptimum:
    """g*(y) = E[Z*Z*X | Y=y] / E[Z*Z | Y=y] per component, by enumeration.

    Components whose denominator is zero are flagged arbitrary (any value is
    optimal there) and set to 0.
    """
    num, den = {}, {}
    for p, x, y, z in joint_table(model, z_dist, y_map):
        w = p * z * z
        num[y] = num.get(y, 0.0) + w * x
        den[y] = den.get(y, 0.0) + w
    values, arbitrary = {}, {}
    for y in num:
        zero = den[y] == 0
        arbitrary[y] = zero
        values[y] = np.where(zero, 0.0, num[y] / np.where(zero, 1.0, den[y]))
    return WeightedOptimum(values, arbitrary)


def weighted_loss(table, g) -> float:
    """E || Z * (g(Y) - X) ||^2 over an enumerated joint table."""
    return float(sum(p * np.sum((z * (g(y) - x)) ** 2) for p, x, y, z in table))


def three_point_toy():
    """A 3-point distribution on R^2 with a noisy binary observation and a
    data-independent query mask whose second bit depends on y."""
    model = DiscreteModel(np.array([[0.0, 1.0], [1.0, -1.0], [2.0, 0.5]]), np.array([0.2, 0.5, 0.3]))

    def y_map(x):
        return [(0.7, int(x[0] >= 1.0)), (0.3, int(x[0] < 1.0))]

    def z_dist(x, y):
        if y == 0:
            return [(0.6, (1, 1)), (0.4, (1, 0))]
        return [(0.5, (1, 0)), (0.5, (0, 0))]

    return model, z_dist, y_map


def verify_weighted_optimum(model=None, z_dist=None, y_map=None, h=1e-3) -> VerifierReport:
    """Perturb each component of the enumerated optimum by +-h.

    Passes when every perturbation of a non-arbitrary component strictly
    raises the exhaustive loss (and arbitrary ones leave it unchanged).
    ``estimate`` is the smallest observed increase.
    """
    if model is None:
        model, z_dist, y_map = three_point_toy()
    table = joint_table(model, z_dist, y_map)
    sol = lemma1_optimum(model, z_dist, y_map)
    base = weighted_loss(table, sol)
    smallest, ok, checked = np.inf, True, 0
    for y, v in sol.values.items():
        for i in range(v.size):
            for step in (h, -h):
                vals = {k: w.copy() for k, w in sol.values.items()}
                vals[y][i] += step
                inc = weighted_loss(table, lambda yy: vals[yy]) - base
                if sol.arbitrary[y][i]:
                    ok &= abs(inc) <= 1e-15
                    continue
                checked += 1
                smallest = min(smallest, inc)
                ok &= inc > 0
    return VerifierReport("weighted_optimum_perturbation", float(smallest), 0.0, float("nan"), float("nan"), h,
                          bool(ok and checked > 0), {"base_loss": base, "checked": checked})


# ---------------------------------------------------------------------------
# identity verifiers


@dataclass
class VerifierReport:
    name: str
    estimate: float
    reference: float
    stderr: float
    rel_err: float
    tol: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: estimate={self.estimate:.6g} reference={self.reference:.6g} "
                f"rel_err={self.rel_err:.3g} tol={self.tol:g}")


def enumerate_pixel_patterns(d, rate, ctx_ratio):
    """All (M, M_ctx) pairs with probabilities for iid pixel masks and partitions.

    Each coordinate is independently unobserved (1 - rate), observed but not in
    context (rate (1 - c)), or in context (rate c).
    """
    states = [(0, 0, 1 - rate), (1, 0, rate * (1 - ctx_ratio)), (1, 1, rate * ctx_ratio)]
    out = []
    for combo in itertools.product(states, repeat=d):
        p = math.prod(s[2] for s in combo)
        if p > 0:
            out.append((p, np.array([s[0] for s in combo], bool), np.array([s[1] for s in combo], bool)))
    return out


def _draw_pair(mask_spec, part_spec, d, rng):
    M = sample_mask(mask_spec, (d,), rng)
    if not M.any():
        return M.astype(bool), M.astype(bool)
    ctx, _ = sample_partition(M, part_spec, rng)
    return M.astype(bool), ctx.astype(bool)


def verify_variance_identity(model: GaussianModel, mask_spec: MaskSpec, part_spec: PartitionSpec, t, n_mc, rng,
                             tol=0.05, schedule=None, n_rhs=200_000) -> VerifierReport:
    """E||E[x0|ctx] - E[x0|obs]||^2 against E tr Var[x0|ctx] - E tr Var[x0|obs].

    Left side: Monte Carlo over (x0, eps, M, M_ctx) with both conditional
    means from the Gaussian oracle.  Right side: analytic posterior
    covariances averaged over masks, by enumeration when the pattern space is
    small and by sampling masks otherwise.
    """
    if n_mc < 1000:
        raise ConfigError("n_mc must be >= 1000")
    schedule = schedule or NoiseSchedule()
    ops = PosteriorOperators(model, t, schedule)
    d = model.d
    Ms = np.empty((n_mc, d), bool)
    Cs = np.empty((n_mc, d), bool)
    for i in range(n_mc):
        Ms[i], Cs[i] = _draw_pair(mask_spec, part_spec, d, rng)
    x0 = model.sample(n_mc, rng)
    y = schedule.alpha(t) * x0 + schedule.sigma(t) * rng.standard_normal(x0.shape)
    sq = ((ops.means(Cs, y) - ops.means(Ms, y)) ** 2).sum(axis=1)
    lhs, se = float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_mc))

    if mask_spec.kind == PIXEL_IID and part_spec.strategy == PIXEL_LEVEL and 3**d <= 4096:
        pats = enumerate_pixel_patterns(d, mask_spec.rate, part_spec.ctx_ratio)
        rhs = sum(p * (ops.trace_cov(c) - ops.trace_cov(m)) for p, m, c in pats)
        how = "enumeration"
    else:
        acc = 0.0
        for _ in range(n_rhs):
            m, c = _draw_pair(mask_spec, part_spec, d, rng)
            acc += ops.trace_cov(c) - ops.trace_cov(m)
        rhs = acc / n_rhs
        how = f"sampled masks (n={n_rhs})"
    denom = abs(rhs) if rhs != 0 else 1.0
    rel = abs(lhs - rhs) / denom
    return VerifierReport("variance_identity", lhs, float(rhs), se, rel, tol, bool(rel < tol),
                          {"rhs_method": how, "t": t, "n_mc": n_mc})


def ctx_distribution(M, part_spec: PartitionSpec, rng, n_sample=100_000):
    """Support and probabilities of M_ctx given M (exact for pixel-level)."""
    M = np.asarray(M, dtype=bool).ravel()
    idx = np.flatnonzero(M)
    if part_spec.strategy == PIXEL_LEVEL and idx.size <= 12:
        c = part_spec.ctx_ratio
        pats, probs = [], []
        for bits in itertools.product([0, 1], repeat=idx.size):
            k = sum(bits)
            p = c**k * (1 - c) ** (idx.size - k)
            if p == 0:
                continue
            pat = np.zeros(M.size, bool)
            pat[idx[np.array(bits, bool)]] = True
            pats.append(pat)
            probs.append(p)
        return np.array(pats), np.array(probs)
    draws = np.array([sample_partition(M.astype(np.uint8), part_spec, rng)[0].astype(bool) for _ in range(n_sample)])
    pats, counts = np.unique(draws, axis=0, return_counts=True)
    return pats, counts / counts.sum()


def fit_inverse_k(K_list, errs):
    """Least-squares fit err(K) = a + b / K; returns (a, b)."""
    K = np.asarray(K_list, dtype=np.float64)
    X = np.stack([np.ones_like(K), 1.0 / K], axis=1)
    (a, b), *_ = np.linalg.lstsq(X, np.asarray(errs, dtype=np.float64), rcond=None)
    return float(a), float(b)


def verify_ensemble_decomposition(model: GaussianModel, injected_bias_fn, noise_var, K_list, n_trials, rng, *,
                                  mask_spec: MaskSpec = None, part_spec: PartitionSpec = None, t=1e-3,
                                  tol=0.10, schedule=None, x_obs=None, M=None, decorrelate=True):
    """K-ensemble error against a + slope / K for a synthetic member model.

    One observation (x_obs, M) is fixed.  Each ensemble member draws its own
    context from the partitioner and returns the exact conditional mean
    E[x0 | ctx] plus ``injected_bias_fn(ctx)`` plus N(0, noise_var I) noise.
    The squared error of the K-average against E[x0 | obs] is averaged over
    ``n_trials`` and fitted by least squares.  Predictions:

      a     = || gap + E[b] ||^2, gap = E_ctx E[x0|ctx] - E[x0|obs]
      slope = tr Var[E[x0|ctx]] + tr Var[b] + d * noise_var

    The slope formula assumes the bias varies independently of E[x0 | ctx].
    With ``decorrelate`` the injected bias is replaced by
    b - beta (E[x0|ctx] - E E[x0|ctx]), beta chosen so the summed cross
    covariance vanishes; it is still a deterministic function of ctx.  The
    raw cross term is reported in the table either way.

    Returns a list of two reports (asymptote, slope) and the error table.
    """
    schedule = schedule or NoiseSchedule()
    mask_spec = mask_spec or MaskSpec.pixel_iid(0.75)
    part_spec = part_spec or PartitionSpec(PIXEL_LEVEL, 0.5, 1.0)
    d = model.d
    if M is None:
        while True:
            M = sample_mask(mask_spec, (d,), rng).astype(bool)
            if M.sum() >= 2:
                break
    M = np.asarray(M, dtype=bool)
    if x_obs is None:
        x_obs = model.sample(1, rng)[0]
    y = schedule.alpha(t) * x_obs + schedule.sigma(t) * rng.standard_normal(d)
    ops = PosteriorOperators(model, t, schedule)
    target = ops.means(M[None], y[None])[0]
    pats, probs = ctx_distribution(M, part_spec, rng)
    cond = ops.means(pats, np.broadcast_to(y, pats.shape))
    bias = np.array([np.asarray(injected_bias_fn(p), dtype=np.float64) for p in pats]).reshape(len(pats), d)

    mean_cond = probs @ cond
    mean_bias = probs @ bias
    dev = cond - mean_cond
    var_cond = float(probs @ (dev ** 2).sum(axis=1))
    cross_raw = float(2 * probs @ (dev * (bias - mean_bias)).sum(axis=1))
    if decorrelate and var_cond > 0:
        bias = bias - (cross_raw / (2 * var_cond)) * dev
        mean_bias = probs @ bias
    gap = mean_cond - target
    a_pred = float(np.sum((gap + mean_bias) ** 2))
    var_bias = float(probs @ ((bias - mean_bias) ** 2).sum(axis=1))
    slope_pred = var_cond + var_bias + d * noise_var

    member = cond + bias
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    errs = []
    for K in K_list:
        tot, done = 0.0, 0
        chunk = max(1, 200_000 // K)
        while done < n_trials:
            n = min(chunk, n_trials - done)
            picks = np.searchsorted(cdf, rng.random((n, K)), side="right")
            avg = member[picks].mean(axis=1)
            if noise_var > 0:
                avg = avg + rng.standard_normal((n, d)) * np.sqrt(noise_var / K)
            tot += ((avg - target) ** 2).sum()
            done += n
        errs.append(tot / n_trials)
    a_fit, b_fit = fit_inverse_k(K_list, errs)

    def rep(name, est, ref):
        rel = abs(est - ref) / abs(ref) if ref != 0 else abs(est)
        return VerifierReport(name, est, ref, float("nan"), rel, tol, bool(rel < tol),
                              {"K_list": list(map(int, K_list)), "errors": [float(e) for e in errs]})

    reports = [rep("ensemble_asymptote", a_fit, a_pred), rep("ensemble_slope", b_fit, slope_pred)]
    table = {"K": list(map(int, K_list)), "err": [float(e) for e in errs],
             "a_pred": a_pred, "slope_pred": slope_pred, "var_cond": var_cond, "var_bias": var_bias,
             "cross_cov_raw": cross_raw, "cross_cov": float(2 * probs @ (dev * (bias - mean_bias)).sum(axis=1))}
    return reports, table


def gaussian_model_fn(model: GaussianModel, schedule: NoiseSchedule = None):
    """Exact posterior-mean "denoiser" with the network calling convention.

    ``fn(t, masked_input, ctx_mask)`` takes batches whose trailing dims flatten
    to d and returns E[x0 | ctx_mask * x_t] with the batch's shape.
    """
    cache = {}

    def fn(t, masked_input, ctx_mask):
        x = np.asarray(masked_input, dtype=np.float64)
        shape = x.shape
        B = shape[0]
        ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        out = np.empty((B, model.d))
        xs = x.reshape(B, model.d)
        ms = np.asarray(ctx_mask).reshape(B, model.d).astype(bool)
        for tv in np.unique(ts):
            rows = ts == tv
            ops = cache.setdefault(float(tv), PosteriorOperators(model, float(tv), schedule))
            out[rows] = ops.means(ms[rows], xs[rows])
        return out.reshape(shape)

    return fn
