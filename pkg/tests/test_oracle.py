import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_head
from tilesparse.attention import HeadTensors, full_attention, sparse_attention
from tilesparse.errors import DegenerateRowError, DomainError, InvalidMaskError, MemoryBudgetError
from tilesparse.metrics import output_error
from tilesparse.oracle import (
    QueryRowSubset,
    oracle_mask,
    random_topk_mask,
    round_half_up,
    row_normalize,
    sample_query_rows,
    target_scores_dense,
    target_scores_streaming,
    topk_mask,
)
from tilesparse.tiling import LatentShape, TileConfig, build_layout, untile


def brute_block_max(probs, layout):
    nt, tt = layout.n_tiles, layout.token_tile
    s = np.zeros((nt, nt))
    for u in range(probs.shape[0]):
        for v in range(probs.shape[1]):
            s[tt[u], tt[v]] = max(s[tt[u], tt[v]], probs[u, v])
    return s


def test_dense_matches_brute_force_pooling():
    layout = build_layout(LatentShape(4, 8, 8), TileConfig(2, 4, 4))  # n=256, b=32
    h = random_head(256, 16, seed=1, scale=1.5)
    _, probs = full_attention(h, return_probs=True)
    np.testing.assert_allclose(target_scores_dense(h, layout), brute_block_max(probs, layout), atol=1e-6)
    np.testing.assert_allclose(target_scores_dense(h, layout, probs=probs), brute_block_max(probs, layout), atol=0)


def test_single_tile_target_is_global_max():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(2, 4, 4))
    h = random_head(32, 8, seed=2)
    _, probs = full_attention(h, return_probs=True)
    np.testing.assert_allclose(target_scores_dense(h, layout), [[probs.max()]], rtol=1e-6)


def test_uniform_attention_targets():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(1, 2, 2))
    rng = np.random.default_rng(0)
    h = HeadTensors(rng.normal(size=(32, 4)), np.ones((32, 4)), rng.normal(size=(32, 4)))
    np.testing.assert_allclose(target_scores_dense(h, layout), 1 / 32, rtol=1e-6)
    np.testing.assert_allclose(target_scores_streaming(h, layout), 1 / 32, rtol=1e-6)


def test_constant_logits_streaming():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(2, 2, 1))
    h = HeadTensors(np.zeros((32, 4)), np.zeros((32, 4)), np.ones((32, 4)))
    np.testing.assert_allclose(target_scores_streaming(h, layout), 1 / 32, rtol=1e-6)


def test_dense_memory_budget():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(1, 2, 2))
    h = random_head(32, 4, seed=0)
    with pytest.raises(MemoryBudgetError, match="streaming"):
        target_scores_dense(h, layout, max_elements=100)


def test_avg_pool_target():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(1, 2, 2))
    h = random_head(32, 4, seed=3)
    _, probs = full_attention(h, return_probs=True)
    avg = target_scores_dense(h, layout, probs=probs, pool="avg")
    tt = layout.token_tile
    j0 = np.flatnonzero(tt == 0)
    j1 = np.flatnonzero(tt == 1)
    assert avg[0, 1] == pytest.approx(probs[np.ix_(j0, j1)].mean(), rel=1e-6)


STREAM_LAYOUTS = [((4, 4, 4), (2, 2, 2)), ((2, 8, 8), (1, 4, 4)), ((4, 8, 8), (4, 2, 2)), ((2, 4, 8), (2, 2, 8))]


@pytest.mark.parametrize("case", range(100))
def test_streaming_equals_dense(case):
    shape, cfg = STREAM_LAYOUTS[case % len(STREAM_LAYOUTS)]
    layout = build_layout(LatentShape(*shape), TileConfig(*cfg))
    # larger scales give peaky maps, where the running-max rescaling matters
    h = random_head(layout.shape.n, 16, seed=100 + case, scale=0.5 + case % 5)
    dense = target_scores_dense(h, layout)
    rows = None if case % 2 == 0 else sample_query_rows(layout.n_tiles, 0.25 + 0.25 * (case % 3), seed=case)
    stream = target_scores_streaming(h, layout, rows)
    ref = dense if rows is None else dense[rows.indices]
    assert stream.shape == ref.shape
    assert np.abs(stream - ref).max() < 1e-5


def test_streaming_row_restriction():
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(1, 2, 2))
    h = random_head(32, 8, seed=7, scale=2.0)
    dense = target_scores_dense(h, layout)
    row0 = target_scores_streaming(h, layout, QueryRowSubset(np.array([0]), 1 / 8, 0))
    assert row0.shape == (1, layout.n_tiles)
    np.testing.assert_allclose(row0[0], dense[0], atol=1e-6)


def test_row_normalize_examples():
    np.testing.assert_array_equal(row_normalize(np.array([[2.0, 2.0]])), [[0.5, 0.5]])
    a = np.array([[0.25, 0.75], [0.5, 0.5]])
    np.testing.assert_allclose(row_normalize(a), a)
    with pytest.raises(DegenerateRowError):
        row_normalize(np.array([[0.0, 0.0]]))
    with pytest.raises(DomainError):
        row_normalize(np.array([[-1.0, 2.0]]))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_row_normalize_sums(r, c, seed):
    s = np.random.default_rng(seed).random((r, c)).astype(np.float32) + 1e-3
    np.testing.assert_allclose(row_normalize(s).sum(axis=1), 1.0, atol=1e-6)


def test_topk_tie_rule_and_budget():
    m = topk_mask(np.array([[0.1, 0.9, 0.9], [0.5, 0.2, 0.3], [0.0, 0.0, 1.0]]), 1)
    np.testing.assert_array_equal(m.indices(), [[1], [0], [2]])
    assert topk_mask(np.zeros((3, 3)), 2).indices().tolist() == [[0, 1]] * 3
    assert topk_mask(np.random.default_rng(0).random((4, 4)), 4).m.all()
    with pytest.raises(InvalidMaskError):
        topk_mask(np.zeros((2, 2)), 3)


@given(st.integers(1, 10), st.data())
def test_topk_matches_sort_oracle(c, data):
    r = c
    k = data.draw(st.integers(1, c))
    s = np.array(data.draw(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=c, max_size=c),
                                    min_size=r, max_size=r)))
    m = topk_mask(s, k)
    assert (m.m.sum(axis=1) == k).all()
    for i in range(r):
        expected = sorted(range(c), key=lambda j: (-s[i, j], j))[:k]
        assert sorted(expected) == sorted(np.flatnonzero(m.m[i]).tolist())


def test_query_row_sampling():
    sub = sample_query_rows(16, 0.25, seed=3)
    assert len(sub) == 4 and len(set(sub.indices.tolist())) == 4
    assert (np.diff(sub.indices) > 0).all()
    np.testing.assert_array_equal(sub.indices, sample_query_rows(16, 0.25, seed=3).indices)
    np.testing.assert_array_equal(sample_query_rows(16, 1.0, seed=3).indices, np.arange(16))
    assert len(sample_query_rows(16, 0.01, seed=0)) == 1
    with pytest.raises(ValueError):
        sample_query_rows(16, 0.0, seed=0)


def test_round_half_up():
    assert round_half_up(2.5) == 3
    assert round_half_up(1.5) == 2
    assert round_half_up((1 - 0.9) * 40) == 4
    assert round_half_up(0.49) == 0


def test_random_mask_is_seeded():
    a, b = random_topk_mask(8, 3, seed=1), random_topk_mask(8, 3, seed=1)
    np.testing.assert_array_equal(a.m, b.m)
    assert (a.m.sum(axis=1) == 3).all()


def test_oracle_dominates_random_mask():
    layout = build_layout(LatentShape(4, 8, 8), TileConfig(1, 4, 4))
    wins = 0
    for seed in range(100):
        h = random_head(layout.shape.n, 16, seed=2000 + seed, scale=1.5)
        o_full, _ = full_attention(h)
        k = 2
        ht = h.tiled(layout)
        err_o = output_error(o_full, untile(sparse_attention(ht, oracle_mask(h, layout, k)), layout))
        err_r = output_error(o_full, untile(sparse_attention(ht, random_topk_mask(layout.n_tiles, k, seed)), layout))
        wins += err_o <= err_r
    assert wins >= 95


def test_max_pool_keeps_dominant_tile_first():
    # per query tile: one dominant key token in tile D, a uniformly warm tile C
    layout = build_layout(LatentShape(2, 4, 4), TileConfig(1, 2, 2))
    n, nt = 32, layout.n_tiles
    rng = np.random.default_rng(5)
    members = [layout.perm[j * 4:(j + 1) * 4] for j in range(nt)]
    logits = np.zeros((n, n))
    dom = {}
    for i in range(nt):
        d_tile, c_tile = rng.choice(nt, size=2, replace=False)
        dom[i] = d_tile
        u = rng.choice(members[d_tile])
        for q in members[i]:
            logits[q, u] = 5.0
            logits[q, members[c_tile]] = 4.0
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    h = random_head(n, 4, seed=0)
    smax = target_scores_dense(h, layout, probs=probs)
    savg = target_scores_dense(h, layout, probs=probs, pool="avg")
    assert all(smax[i].argmax() == dom[i] for i in range(nt))
    assert not any(savg[i].argmax() == dom[i] for i in range(nt))
