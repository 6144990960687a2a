"""Observation masks, context/query partitioning, and query-probability diagnostics.

Masks are uint8 arrays with 1 marking an observed entry.  A mask may vary over
only its trailing "site" axes (e.g. the spatial H, W of a (frames, H, W)
field) and be constant along the leading ones; ``site_ndim`` selects this.
Block masks always live on the last two axes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyMaskError, InfeasibleConditioningError

PIXEL_IID = "pixel_iid"
BLOCK_GRID = "block_grid"
PIXEL_LEVEL = "pixel_level"
BLOCK_LEVEL = "block_level"


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    rate: float | None = None
    grid: tuple | None = None
    observed_blocks: int | None = None
    site_ndim: int | None = None

    def __post_init__(self):
        if self.kind == PIXEL_IID:
            if self.rate is None or not 0.0 < self.rate <= 1.0:
                raise ConfigError(f"pixel_iid rate must be in (0, 1], got {self.rate}")
        elif self.kind == BLOCK_GRID:
            if self.grid is None or len(self.grid) != 2 or min(self.grid) < 1:
                raise ConfigError(f"block_grid needs positive (grid_h, grid_w), got {self.grid}")
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
            n = self.grid[0] * self.grid[1]
            if self.observed_blocks is None or not 0 < self.observed_blocks <= n:
                raise ConfigError(f"observed_blocks must be in [1, {n}], got {self.observed_blocks}")
            object.__setattr__(self, "site_ndim", 2)
        else:
            raise ConfigError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def pixel_iid(cls, rate, site_ndim=None):
        return cls(PIXEL_IID, rate=rate, site_ndim=site_ndim)

    @classmethod
    def block_grid(cls, grid_h, grid_w, observed_blocks):
        return cls(BLOCK_GRID, grid=(grid_h, grid_w), observed_blocks=observed_blocks)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str
    ctx_ratio: float
    qry_ratio: float
    grid: tuple | None = None
    site_ndim: int | None = None

    def __post_init__(self):
        if self.strategy not in (PIXEL_LEVEL, BLOCK_LEVEL):
            raise ConfigError(f"unknown partition strategy {self.strategy!r}")
        for name in ("ctx_ratio", "qry_ratio"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.strategy == BLOCK_LEVEL:
            if self.grid is None:
                raise ConfigError("block_level partitioning needs grid dims")
            object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
            object.__setattr__(self, "site_ndim", 2)

    @classmethod
    def matching(cls, mask_spec: MaskSpec, ctx_ratio, qry_ratio, strategy=None):
        """Partition spec following the structural pattern of ``mask_spec``."""
        if strategy is None:
            strategy = BLOCK_LEVEL if mask_spec.kind == BLOCK_GRID else PIXEL_LEVEL
        grid = mask_spec.grid if strategy == BLOCK_LEVEL else None
        return cls(strategy, ctx_ratio, qry_ratio, grid=grid, site_ndim=mask_spec.site_ndim)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**d)


# ---------------------------------------------------------------------------
# helpers


def block_edges(n, g):
    """Near-equal integer block boundaries; exact when g divides n."""
    return np.floor(np.arange(g + 1) * n / g + 1e-9).astype(int)


def block_index_map(H, W, grid):
    gh, gw = grid
    if H < gh or W < gw:
        raise ConfigError(f"grid {grid} does not fit a {H}x{W} field")
    rows = np.searchsorted(block_edges(H, gh), np.arange(H), side="right") - 1
    cols = np.searchsorted(block_edges(W, gw), np.arange(W), side="right") - 1
    return rows[:, None] * gw + cols[None, :]


def _site_shape(shape, site_ndim):
    if site_ndim is None or site_ndim >= len(shape):
        return tuple(shape)
    return tuple(shape[len(shape) - site_ndim:])


def to_site(mask, site_ndim):
    """Collapse a mask that is constant along its leading axes to its site pattern."""
    mask = np.asarray(mask)
    lead = mask.ndim - len(_site_shape(mask.shape, site_ndim))
    return mask[(0,) * lead]


def _expand(site, shape):
    return np.ascontiguousarray(np.broadcast_to(site, shape)).astype(np.uint8)


def _round_count(ratio, n):
    return max(1, int(math.floor(ratio * n + 0.5)))


# ---------------------------------------------------------------------------
# sampling


def sample_mask(spec: MaskSpec, shape, rng) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if spec.kind == PIXEL_IID:
        site = rng.random(_site_shape(shape, spec.site_ndim)) < spec.rate
        return _expand(site, shape)
    if len(shape) < 2:
        raise ConfigError(f"block masks need at least 2 axes, got shape {shape}")
    bmap = block_index_map(shape[-2], shape[-1], spec.grid)
    chosen = rng.choice(spec.grid[0] * spec.grid[1], size=spec.observed_blocks, replace=False)
    return _expand(np.isin(bmap, chosen), shape)


def sample_partition(M, spec: PartitionSpec, rng):
    """Draw (M_ctx, M_qry), both subsets of M, independently of each other."""
    M = np.asarray(M)
    if not M.any():
        raise EmptyMaskError("cannot partition an all-zero mask")
    site = to_site(M, spec.site_ndim).astype(bool)
    if spec.strategy == PIXEL_LEVEL:
        ctx = site & (rng.random(site.shape) < spec.ctx_ratio)
        qry = site & (rng.random(site.shape) < spec.qry_ratio)
    else:
        bmap = block_index_map(site.shape[-2], site.shape[-1], spec.grid)
        observed = np.unique(bmap[site])
        n_ctx = _round_count(spec.ctx_ratio, observed.size)
        n_qry = _round_count(spec.qry_ratio, observed.size)
        ctx = site & np.isin(bmap, rng.choice(observed, n_ctx, replace=False))
        qry = site & np.isin(bmap, rng.choice(observed, n_qry, replace=False))
    return _expand(ctx, M.shape), _expand(qry, M.shape)


# ---------------------------------------------------------------------------
# conditional query probability


def _klog(k, p):
    """k * log(p) with the convention 0 * log(0) = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(k == 0, 0.0, k * np.log(p))


def _conditional_masks(mask_spec, part_spec, ctx_site, n, rng):
    """n proposals of M containing ctx, with their log importance corrections.

    Returns (Ms, log_corr) where Ms is (n, D) bool over flattened sites and
    ``log_corr`` is log p(M | ctx within M) - log q(M).  Block masks are drawn
    from the exact conditional prior.  For pixel masks under a pixel-level
    partition the proposal is tilted to the exact posterior P(M | M_ctx).
    """
    D = ctx_site.size
    flat_ctx = ctx_site.ravel()
    if mask_spec.kind == PIXEL_IID:
        r = mask_spec.rate
        rho = r
        if part_spec.strategy == PIXEL_LEVEL and r < 1.0:
            keep = r * (1.0 - part_spec.ctx_ratio)
            rho = keep / (keep + 1.0 - r)
        extra = (rng.random((n, D)) < rho) & ~flat_ctx[None, :]
        Ms = flat_ctx[None, :] | extra
        k = extra.sum(axis=1)
        free = D - int(flat_ctx.sum())
        log_corr = (_klog(k, r) + _klog(free - k, 1.0 - r)) - (_klog(k, rho) + _klog(free - k, 1.0 - rho))
        return Ms, log_corr
    bmap = block_index_map(*ctx_site.shape, mask_spec.grid).ravel()
    n_blocks = mask_spec.grid[0] * mask_spec.grid[1]
    forced = np.unique(bmap[flat_ctx])
    extra = mask_spec.observed_blocks - forced.size
    if extra < 0:
        raise InfeasibleConditioningError(
            f"context touches {forced.size} blocks but masks observe only {mask_spec.observed_blocks}"
        )
    free = np.setdiff1d(np.arange(n_blocks), forced)
    keys = rng.random((n, free.size))
    picks = free[np.argsort(keys, axis=1)[:, :extra]]
    blocks = np.zeros((n, n_blocks), dtype=bool)
    blocks[:, forced] = True
    np.put_along_axis(blocks, picks, True, axis=1)
    return blocks[:, bmap], np.zeros(n)


def _log_comb_table(n):
    lg = np.array([math.lgamma(k + 1) for k in range(n + 1)])
    return lambda N, K: lg[N] - lg[K] - lg[N - K]


def _partition_weights(part_spec, ctx_site, Ms):
    """log P(partition of M yields exactly ctx), and P((M_qry)_i = 1 | M), per draw."""
    flat_ctx = ctx_site.ravel()
    n_ctx_pts = int(flat_ctx.sum())
    if part_spec.strategy == PIXEL_LEVEL:
        c, q = part_spec.ctx_ratio, part_spec.qry_ratio
        n_rest = Ms.sum(axis=1) - n_ctx_pts
        logw = _klog(n_ctx_pts, c) + _klog(n_rest, 1.0 - c)
        return logw, q * Ms
    bmap = block_index_map(*ctx_site.shape, part_spec.grid).ravel()
    n_blocks = part_spec.grid[0] * part_spec.grid[1]
    onehot = np.zeros((n_blocks, bmap.size))
    onehot[bmap, np.arange(bmap.size)] = 1.0
    b_obs = (Ms @ onehot.T > 0).sum(axis=1).astype(int)
    ctx_blocks = np.unique(bmap[flat_ctx])
    in_ctx_blocks = np.isin(bmap, ctx_blocks)
    n_need = np.floor(part_spec.ctx_ratio * b_obs + 0.5).astype(int).clip(min=1)
    consistent = (Ms[:, in_ctx_blocks] == flat_ctx[in_ctx_blocks]).all(axis=1)
    ok = consistent & (n_need == ctx_blocks.size) & (b_obs >= n_need)
    lc = _log_comb_table(n_blocks)
    logw = np.where(ok, -lc(b_obs, np.minimum(n_need, b_obs)), -np.inf)
    n_qry = np.floor(part_spec.qry_ratio * b_obs + 0.5).astype(int).clip(min=1)
    frac = np.where(b_obs > 0, n_qry / np.maximum(b_obs, 1), 0.0)
    return logw, frac[:, None] * Ms


def query_prob_estimate(mask_spec: MaskSpec, part_spec: PartitionSpec, ctx, n_samples: int, rng,
                        chunk: int = 4096, return_ess: bool = False):
    """Monte Carlo estimate of P((M_qry)_i = 1 | M_ctx = ctx) for every entry.

    Sums over observation masks by the law of total probability: masks are
    drawn from p_mask restricted to those containing ``ctx`` and weighted by
    the probability that the partitioner produces ``ctx`` from them, giving
    self-normalised samples of P(M | M_ctx).  The per-draw query probability
    P((M_qry)_i = 1 | M_ctx, M) replaces a sampled query indicator.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    ctx = np.asarray(ctx)
    site_ndim = mask_spec.site_ndim if mask_spec.kind == PIXEL_IID else 2
    ctx_site = to_site(ctx, site_ndim).astype(bool)
    acc = np.zeros(ctx_site.size)
    total = total_sq = 0.0
    ref = -np.inf
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        Ms, log_corr = _conditional_masks(mask_spec, part_spec, ctx_site, n, rng)
        logw, qp = _partition_weights(part_spec, ctx_site, Ms.astype(np.float64))
        logw = logw + log_corr
        done += n
        finite = np.isfinite(logw)
        if not finite.any():
            continue
        top = logw[finite].max()
        if top > ref:
            scale = math.exp(ref - top) if np.isfinite(ref) else 0.0
            acc *= scale
            total *= scale
            total_sq *= scale * scale
            ref = top
        w = np.exp(logw - ref)
        acc += w @ qp
        total += w.sum()
        total_sq += (w * w).sum()
    if total == 0.0:
        raise InfeasibleConditioningError(
            "no sampled observation mask can produce this context under the partition strategy"
        )
    probs = np.broadcast_to((acc / total).reshape(ctx_site.shape), ctx.shape).copy()
    if return_ess:
        return probs, total * total / total_sq
    return probs


@dataclass
class CoverageReport:
    min_prob: float
    max_prob: float
    uniformity: float
    zero_dims: list = field(default_factory=list)
    n_contexts: int = 0
    n_samples: int = 0

    @property
    def compliant(self):
        return not self.zero_dims

    def to_dict(self):
        return {
            "min_prob": self.min_prob,
            "max_prob": self.max_prob,
            "uniformity": self.uniformity,
            "zero_dims": [list(map(int, z)) for z in self.zero_dims],
            "n_contexts": self.n_contexts,
            "n_samples": self.n_samples,
        }


def coverage_diagnostic(mask_spec: MaskSpec, part_spec: PartitionSpec, shape, n_samples: int, rng,
                        n_contexts: int = 4) -> CoverageReport:
    """Check the non-zero and uniform query exposure conditions on sampled contexts.

    For each of ``n_contexts`` contexts drawn through the real pipeline
    (M ~ p_mask, then the partitioner), estimates the query probability of
    every entry outside the context.  Entries whose estimate is exactly zero
    are listed (as site indices); uniformity is the worst max/min ratio of the
    non-zero estimates.  No threshold is enforced on uniformity.
    """
    site_ndim = mask_spec.site_ndim if mask_spec.kind == PIXEL_IID else 2
    site_shape = _site_shape(tuple(shape), site_ndim)
    zero, lo, hi, worst = set(), np.inf, 0.0, 1.0
    for _ in range(n_contexts):
        M = sample_mask(mask_spec, site_shape, rng)
        ctx, _ = sample_partition(M, part_spec, rng)
        probs = query_prob_estimate(mask_spec, part_spec, ctx, n_samples, rng)
        outside = ctx == 0
        p_out = probs[outside]
        for idx in np.argwhere(outside & (probs == 0)):
            zero.add(tuple(int(i) for i in idx))
        if p_out.size:
            lo, hi = min(lo, float(p_out.min())), max(hi, float(p_out.max()))
            nz = p_out[p_out > 0]
            if nz.size:
                worst = max(worst, float(nz.max() / nz.min()))
    return CoverageReport(
        min_prob=float(lo) if np.isfinite(lo) else 0.0,
        max_prob=float(hi),
        uniformity=worst,
        zero_dims=sorted(zero),
        n_contexts=n_contexts,
        n_samples=n_samples,
    )
