import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lacuna.errors import ConfigError, EmptyMaskError, InfeasibleConditioningError
from lacuna.masks import (
    BLOCK_LEVEL, PIXEL_LEVEL, MaskSpec, PartitionSpec, block_index_map, coverage_diagnostic,
    query_prob_estimate, sample_mask, sample_partition,
)


def test_full_rate_is_all_ones(rng):
    M = sample_mask(MaskSpec.pixel_iid(1.0), (4, 16, 16), rng)
    assert M.dtype == np.uint8 and M.all()


def test_block_mask_observes_whole_blocks(rng):
    spec = MaskSpec.block_grid(3, 3, 7)
    bmap = block_index_map(32, 32, (3, 3))
    for _ in range(20):
        M = sample_mask(spec, (32, 32), rng)
        on = np.unique(bmap[M == 1])
        assert on.size == 7
        # every chosen block is fully observed
        assert all(M[bmap == b].all() for b in on)


def test_pixel_rate_mean_within_binomial_ci(rng):
    n, d = 10_000, 64
    masks = np.stack([sample_mask(MaskSpec.pixel_iid(0.3), (d,), rng) for _ in range(n)])
    sd = np.sqrt(0.3 * 0.7 / (n * d))
    assert abs(masks.mean() - 0.3) < 3 * sd


def test_site_mask_constant_over_leading_axes(rng):
    M = sample_mask(MaskSpec.pixel_iid(0.5, site_ndim=2), (5, 8, 8), rng)
    assert (M == M[0]).all()


def test_bad_specs():
    with pytest.raises(ConfigError):
        MaskSpec.pixel_iid(0.0)
    with pytest.raises(ConfigError):
        MaskSpec.block_grid(3, 3, 10)
    with pytest.raises(ConfigError):
        PartitionSpec(PIXEL_LEVEL, 1.2, 0.5)
    with pytest.raises(ConfigError):
        PartitionSpec(BLOCK_LEVEL, 0.5, 0.5)
    with pytest.raises(ConfigError):
        sample_mask(MaskSpec.block_grid(4, 4, 3), (2, 2), np.random.default_rng(0))


def test_full_ratio_partition_equals_mask(rng):
    M = sample_mask(MaskSpec.pixel_iid(0.6), (16, 16), rng)
    ctx, qry = sample_partition(M, PartitionSpec(PIXEL_LEVEL, 1.0, 1.0), rng)
    assert (ctx == M).all() and (qry == M).all()


def test_block_context_takes_four_whole_blocks(rng):
    spec = MaskSpec.block_grid(3, 3, 7)
    part = PartitionSpec.matching(spec, 4 / 7, 1.0)
    bmap = block_index_map(32, 32, (3, 3))
    M = sample_mask(spec, (32, 32), rng)
    ctx, qry = sample_partition(M, part, rng)
    blocks = np.unique(bmap[ctx == 1])
    assert blocks.size == 4
    assert all(ctx[bmap == b].all() for b in blocks)
    assert (qry == M).all()


def test_empty_mask_rejected(rng):
    with pytest.raises(EmptyMaskError):
        sample_partition(np.zeros((4, 4), np.uint8), PartitionSpec(PIXEL_LEVEL, 0.5, 0.5), rng)


@pytest.mark.parametrize("kind", ["pixel", "block"])
def test_partition_subset_property(kind, rng):
    if kind == "pixel":
        spec = MaskSpec.pixel_iid(0.5)
    else:
        spec = MaskSpec.block_grid(4, 4, 6)
    part = PartitionSpec.matching(spec, 0.5, 0.7)
    for _ in range(1000):
        M = sample_mask(spec, (8, 8), rng)
        if not M.any():
            continue
        ctx, qry = sample_partition(M, part, rng)
        assert not (ctx & (1 - M)).any()
        assert not (qry & (1 - M)).any()


def test_block_context_exchangeable_across_observed_blocks(rng):
    # fixed M with 7 observed blocks; which of them land in ctx should be uniform
    bmap = block_index_map(9, 9, (3, 3))
    M = np.isin(bmap, [0, 1, 2, 4, 5, 7, 8]).astype(np.uint8)
    part = PartitionSpec(BLOCK_LEVEL, 4 / 7, 0.5, grid=(3, 3))
    counts = np.zeros(9)
    for _ in range(100_000 // 10):
        for _ in range(10):
            ctx, _ = sample_partition(M, part, rng)
            counts[np.unique(bmap[ctx == 1])] += 1
    obs = counts[[0, 1, 2, 4, 5, 7, 8]]
    assert counts[[3, 6]].sum() == 0
    assert stats.chisquare(obs).pvalue > 0.01


def test_query_prob_full_rate_is_qry_ratio(rng):
    q, n = 0.4, 10_000
    spec = MaskSpec.pixel_iid(1.0)
    part = PartitionSpec(PIXEL_LEVEL, 0.5, q)
    M = sample_mask(spec, (6, 6), rng)
    ctx, _ = sample_partition(M, part, rng)
    p = query_prob_estimate(spec, part, ctx, n, rng)
    assert np.all(np.abs(p - q) < 3 * np.sqrt(q * (1 - q) / n))


def test_query_prob_pixel_matches_closed_form(rng):
    r, c, q = 0.6, 0.5, 0.7
    spec = MaskSpec.pixel_iid(r)
    part = PartitionSpec(PIXEL_LEVEL, c, q)
    ctx = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    p = query_prob_estimate(spec, part, ctx, 20_000, rng)
    inside = q * r * (1 - c) / (1 - r * c)
    assert np.allclose(p[ctx == 1], q)
    assert np.abs(p[ctx == 0] - inside).max() < 0.03


def test_block_strategy_covers_everything(rng):
    spec = MaskSpec.block_grid(3, 3, 7)
    part = PartitionSpec.matching(spec, 4 / 7, 0.7)
    M = sample_mask(spec, (32, 32), rng)
    ctx, _ = sample_partition(M, part, rng)
    p = query_prob_estimate(spec, part, ctx, 100_000, rng)
    assert (p[ctx == 0] > 0).all()


def test_pixel_context_on_blocks_leaves_masked_blocks_at_zero(rng):
    spec = MaskSpec.block_grid(3, 3, 7)
    part = PartitionSpec(PIXEL_LEVEL, 0.5, 0.7)
    M = sample_mask(spec, (32, 32), rng)
    ctx, _ = sample_partition(M, part, rng)
    p = query_prob_estimate(spec, part, ctx, 10_000, rng)
    assert (p[M == 0] == 0).all()
    assert (p[M == 1] > 0).all()


def test_impossible_context_raises(rng):
    spec = MaskSpec.block_grid(3, 3, 2)
    part = PartitionSpec(PIXEL_LEVEL, 0.5, 0.5)
    ctx = np.zeros((9, 9), np.uint8)
    ctx[0, 0] = ctx[4, 4] = ctx[8, 8] = 1
    with pytest.raises(InfeasibleConditioningError):
        query_prob_estimate(spec, part, ctx, 1000, rng)


def test_coverage_reports(rng):
    spec = MaskSpec.block_grid(3, 3, 7)
    good = coverage_diagnostic(spec, PartitionSpec.matching(spec, 4 / 7, 0.7), (32, 32), 100_000, rng)
    assert good.zero_dims == [] and good.compliant
    bad = coverage_diagnostic(spec, PartitionSpec(PIXEL_LEVEL, 0.5, 0.7), (32, 32), 10_000, rng)
    assert len(bad.zero_dims) > 0 and not bad.compliant


def test_pixel_coverage_is_uniform(rng):
    spec = MaskSpec.pixel_iid(0.6)
    rep = coverage_diagnostic(spec, PartitionSpec(PIXEL_LEVEL, 0.5, 0.7), (16, 16), 100_000, rng, n_contexts=2)
    assert rep.zero_dims == []
    assert rep.uniformity < 1.1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.integers(0, 2**31))
def test_query_prob_bounded(c, q, seed):
    rng = np.random.default_rng(seed)
    spec = MaskSpec.pixel_iid(0.7)
    part = PartitionSpec(PIXEL_LEVEL, c, q)
    ctx = (rng.random((4, 4)) < 0.4).astype(np.uint8)
    p = query_prob_estimate(spec, part, ctx, 500, rng)
    assert np.all(p >= 0) and np.all(p <= q + 1e-12)


def test_spec_dict_round_trip():
    m = MaskSpec.block_grid(3, 3, 7)
    assert MaskSpec.from_dict(m.to_dict()) == m
    p = PartitionSpec.matching(m, 0.5, 0.7)
    assert PartitionSpec.from_dict(p.to_dict()) == p
