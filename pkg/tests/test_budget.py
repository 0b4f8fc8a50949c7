import numpy as np
import pytest
from hypothesis import given, strategies as st

from fluxattn.attention import SegmentedKvCache, full_attention
from fluxattn.blocks import block_scores, build_metadata, selection_from_blocks, topk_blocks
from fluxattn.budget import (
    ErrorBudgetConfig,
    HeadProbe,
    fit_curve,
    fit_slope,
    label_head,
    label_streaming,
    make_probes,
    min_budget,
    output_deviation,
    score_coverage_budget,
)
from fluxattn.errors import FluxError

from conftest import random_cache
from oracles import deviation_scan, least_squares


def needle_cache(rng, block=7, L_cpu=256, D=16, sink=16, local=32, strength=6.0):
    """Gaussian cache with a 4-token run aligned with e_0 inside cpu block ``block`` (blk=16)."""
    L = sink + L_cpu + local
    K = 0.5 * rng.standard_normal((L, D))
    V = rng.standard_normal((L, D))
    start = sink + 16 * block + 5
    K[start:start + 4, 0] += strength
    V[start:start + 4] += 5.0
    q = np.zeros(D)
    q[0] = 4.0
    return SegmentedKvCache.split(K, V, sink, local), q


def probe_for(q, cache):
    return make_probes(q[None, :], [cache], 1)[0]


def test_full_selection_zero_deviation(rng):
    cache, K, V = random_cache(rng)
    q = rng.standard_normal(8)
    meta = build_metadata(cache.k_cpu, 16)
    sel = topk_blocks(q, meta, meta.block_count)
    out = full_attention(q, K, V)
    assert output_deviation(0, q, cache, sel, [out]) == pytest.approx(0.0, abs=1e-12)


def test_empty_selection_on_massless_cpu_segment(rng):
    cache, K, V = random_cache(rng, scale=0.01)
    K[: cache.l_sink, 0] += 50.0
    cache = SegmentedKvCache.split(K, V, cache.l_sink, cache.l_local)
    q = np.zeros(8)
    q[0] = 2.0
    sel = selection_from_blocks((), build_metadata(cache.k_cpu, 16))
    assert output_deviation(0, q, cache, sel, [full_attention(q, K, V)]) < 1e-12


def test_needle_excluded_against_brute_force(rng):
    cache, q = needle_cache(rng)
    K, V = cache.full()
    meta = build_metadata(cache.k_cpu, 16)
    blocks = [b for b in range(meta.block_count) if b != 7]
    sel = selection_from_blocks(blocks, meta)
    full = full_attention(q, K, V)
    keep = list(range(cache.l_sink)) + [cache.l_sink + i for i in sel.token_indices] + \
        list(range(cache.l_sink + cache.l_cpu, len(cache)))
    s = K[keep] @ q / 4.0
    w = np.exp(s - s.max())
    approx = w @ V[keep] / w.sum()
    want = np.linalg.norm(approx - full) / np.linalg.norm(full)
    assert output_deviation(0, q, cache, sel, [full]) == pytest.approx(want, rel=1e-9)
    assert want > 0.1


def test_degenerate_normalizer(rng):
    cache, _, _ = random_cache(rng)
    sel = selection_from_blocks((), build_metadata(cache.k_cpu, 16))
    with pytest.raises(FluxError, match="degenerate-normalizer"):
        output_deviation(0, np.ones(8), cache, sel, [np.zeros(8)])


def test_vacuous_tau_gives_zero(rng):
    cache, q = needle_cache(rng)
    assert min_budget(probe_for(q, cache), 16, 1e9).budget == 0.0


def test_orthogonal_cpu_keys_give_zero(rng):
    # cpu keys live in the orthogonal complement of q; sink keys carry the attention mass
    D = 8
    K = np.zeros((16 + 64 + 16, D))
    K[:, 1:] = rng.standard_normal((K.shape[0], D - 1))
    K[:16, 0] = 5.0
    V = rng.standard_normal(K.shape)
    cache = SegmentedKvCache.split(K, V, 16, 16)
    q = np.zeros(D)
    q[0] = 6.0
    assert min_budget(probe_for(q, cache), 16, 0.10).budget == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_needle_budget_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    cache, q = needle_cache(rng, block=7)
    probe = probe_for(q, cache)
    meta = build_metadata(cache.k_cpu, 16)
    parts = (cache.k_sink, cache.v_sink, cache.k_cpu, cache.v_cpu, cache.k_local, cache.v_local)
    k, _ = deviation_scan(q, parts, 16, 0.10, probe.normalizer, list(block_scores(q, meta)))
    res = min_budget(probe, 16, 0.10)
    assert res.n_blocks == k
    assert res.budget == pytest.approx(k * 16 / cache.l_cpu)
    # the needle block is among the selected ones
    assert 7 in topk_blocks(q, meta, k).selected_blocks


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 16, 32, 64]), st.floats(0.02, 0.4))
def test_min_budget_is_minimal(seed, blk, tau):
    rng = np.random.default_rng(seed)
    cache, _, _ = random_cache(rng, L=16 + 192 + 32, D=8, sink=16, local=32)
    q = 3 * rng.standard_normal(8)
    probe = probe_for(q, cache)
    res = min_budget(probe, blk, tau)
    meta = build_metadata(cache.k_cpu, blk)
    dev = lambda k: probe.deviation(topk_blocks(q, meta, k))
    if res.saturated:
        assert dev(meta.block_count) > tau - 1e-12
    else:
        assert dev(res.n_blocks) <= tau + 1e-12
        if res.n_blocks:
            assert dev(res.n_blocks - 1) > tau


def test_deviation_curve_agrees_with_sparse_path(rng):
    cache, _, _ = random_cache(rng, L=300, D=8)
    q = 2 * rng.standard_normal(8)
    probe = probe_for(q, cache)
    meta = build_metadata(cache.k_cpu, 32)
    order = probe.ranking(32)
    curve = probe.deviation_curve(order, 32)
    for k in range(len(order) + 1):
        assert curve[k] == pytest.approx(probe.deviation(topk_blocks(q, meta, k)), abs=1e-10)


def test_streaming_head_recent_mass(rng):
    cache, K, V = random_cache(rng, L=400, D=8, sink=16, local=64, scale=0.3)
    K[-64:, 1] += 8.0
    cache = SegmentedKvCache.split(K, V, 16, 64)
    q = np.zeros(8)
    q[1] = 5.0
    assert label_streaming(probe_for(q, cache), 0.10)


def test_needle_head_not_streaming(rng):
    cache, q = needle_cache(rng, block=8)
    assert not label_streaming(probe_for(q, cache), 0.10)


def test_empty_cpu_is_streaming(rng):
    K, V = rng.standard_normal((20, 4)), rng.standard_normal((20, 4))
    cache = SegmentedKvCache.split(K, V, 10, 10)
    assert cache.l_cpu == 0
    probe = probe_for(rng.standard_normal(4), cache)
    assert label_streaming(probe, 0.1)
    assert min_budget(probe, 16, 0.1).budget == 0.0


def test_fit_flat_line():
    p = fit_curve({16: 0.05, 32: 0.05, 64: 0.05, 128: 0.05}, 0.05, False)
    assert p.k == pytest.approx(0.0, abs=1e-15)


def test_fit_exact_line():
    p = fit_curve({16: 0.1, 32: 0.2, 64: 0.3, 128: 0.4}, 0.0, False)
    assert p.k == pytest.approx(0.1, abs=1e-12)


def test_fit_matches_normal_equations(rng):
    blks = [16, 32, 64, 128]
    y = 0.02 + 0.013 * np.log2(blks) + 0.01 * rng.standard_normal(4)
    intercept, slope = fit_slope(blks, y)
    want = least_squares(np.log2(blks), y)
    assert intercept == pytest.approx(want[0], abs=1e-9)
    assert slope == pytest.approx(want[1], abs=1e-9)


def test_fit_underdetermined():
    with pytest.raises(FluxError, match="underdetermined"):
        fit_slope([16, 16], [0.1, 0.2])


@given(st.floats(-1, 1), st.floats(-0.5, 0.5))
def test_fit_recovers_exact_lines(b0, k):
    blks = [16, 32, 64, 128]
    intercept, slope = fit_slope(blks, [b0 + k * np.log2(b) for b in blks])
    assert slope == pytest.approx(k, abs=1e-9)
    assert intercept == pytest.approx(b0, abs=1e-9)


def test_head_properties_budget_clamped():
    from fluxattn.budget import HeadProperties
    p = HeadProperties(0.9, 0.1, False)
    assert p.budget(128) == 1.0
    assert HeadProperties(-0.5, 0.0, False).budget(16) == 0.0


def test_label_head_fields(rng):
    cache, q = needle_cache(rng)
    lab = label_head(probe_for(q, cache), ErrorBudgetConfig())
    assert set(lab.budgets) == {1, 16, 32, 64, 128}
    assert lab.props.bgt0 == lab.budgets[1]
    assert not lab.props.streaming
    assert lab.budgets[16] <= lab.budgets[128]


def test_bad_tau():
    with pytest.raises(FluxError, match="bad-config"):
        ErrorBudgetConfig(tau=0.0)


def test_coverage_full_mass(rng):
    cache, q = needle_cache(rng)
    assert score_coverage_budget(probe_for(q, cache), 1.0, 16) == 1.0


def test_coverage_uniform_half():
    # no default tokens and identical scores: half the mass is half the blocks
    K = np.zeros((64 * 16, 4))
    V = np.ones_like(K)
    cache = SegmentedKvCache.split(K, V, 0, 0)
    probe = HeadProbe(np.ones(4), cache, np.ones(4), 2.0)
    assert score_coverage_budget(probe, 0.5, 16) == pytest.approx(0.5)
