from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_unit
from mvann import search as S
from mvann.ant import AntTable, build_ant
from mvann.core import Dataset, MultiVector, SimilarityConfig, usim_exact
from mvann.graph import IndexParams, MvIndex, build_index, edge_weight
from mvann.oracle import ground_truth, linear_scan_topk, recall
from mvann.search import (
    SearchParams,
    augmented_search_layer,
    contrib,
    contrib_all,
    expand_candidates,
    expansion_priorities,
    knn_search,
    search_layer_plain,
    weight_softmax,
)
from mvann.token_index import build_token_index

seeds = st.integers(0, 2**32 - 1)


def table_from_lists(lists, M):
    """AntTable whose token ``t`` holds ``lists[t]`` (target, base score) entries."""
    T = len(lists)
    tab = AntTable.empty(T, M)
    for t, entries in enumerate(lists):
        for r, (tgt, sc) in enumerate(entries):
            tab.targets[t, r] = tgt
            tab.scores[t, r] = sc
        tab.lengths[t] = len(entries)
    return tab


def mean_recall(bundle, queries, gt, **kw):
    p = SearchParams(**kw)
    return float(np.mean([recall(knn_search(bundle.index, bundle.ant, Q, p).ids, gt.ids[i], p.k)
                          for i, Q in enumerate(queries)]))


# -- contribution and weights -----------------------------------------------------

def test_contrib_worked_values(ex21):
    Q, V = ex21
    sim = SimilarityConfig(use_weights=True)
    _, m = usim_exact(Q, V, sim)
    got = [contrib(i, Q, m, sim) for i in range(3)]
    assert got == pytest.approx([0.8, 0.0, 1.0], abs=1e-6)
    assert contrib_all(3, Q, m, sim) == pytest.approx([0.8, 0.0, 1.0], abs=1e-6)


def test_unmatched_token_contributes_nothing():
    Q = MultiVector(0, [[1, 0]])
    V = MultiVector(1, [[1, 0], [0, 1]])
    _, m = usim_exact(Q, V)
    assert contrib(1, Q, m) == 0.0


@given(seed=seeds, nq=st.integers(1, 16), c=st.integers(1, 24), gamma=st.integers(1, 3))
def test_contribs_partition_the_score(seed, nq, c, gamma):
    rng = np.random.default_rng(seed)
    Q = MultiVector(0, random_unit(rng, nq, 8))
    V = MultiVector(1, random_unit(rng, c, 8))
    sim = SimilarityConfig(gamma=gamma)
    score, m = usim_exact(Q, V, sim)
    total = sum(contrib(i, Q, m, sim) for i in range(c))
    if gamma == 1:
        assert total == pytest.approx(score, abs=1e-9)
    else:
        # each gamma-NN term is divided by gamma' in the score but not in contrib
        assert total == pytest.approx(score * min(gamma, c), abs=1e-9)


def test_softmax_examples():
    # e^0.8 / (e^0.8 + 1 + e) etc.
    assert weight_softmax([0.8, 0.0, 1.0]) == pytest.approx([0.3744, 0.1682, 0.4573], abs=1e-4)
    assert weight_softmax([0.8, 0.0, 1.0]) == pytest.approx(oracles.softmax([0.8, 0.0, 1.0]), abs=1e-12)
    assert weight_softmax([2.5] * 4) == pytest.approx([0.25] * 4, abs=1e-15)
    assert weight_softmax([-3.0]).tolist() == [1.0]
    with pytest.raises(ValueError):
        weight_softmax([])


@given(st.lists(st.floats(-500, 500), min_size=1, max_size=64))
def test_softmax_sums_to_one_without_overflow(vals):
    w = weight_softmax(vals)
    assert np.all(np.isfinite(w)) and np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-9


# -- lazy expansion ----------------------------------------------------------------------

def single_token_setup():
    ds = Dataset.from_multivectors([MultiVector(i, [[1.0, 0.0]] if i == 0 else [[0.6, 0.8]]) for i in range(5)])
    Q = MultiVector(0, [[1.0, 0.0]])
    _, m = usim_exact(Q, ds[0])
    lists = [[(3, 0.9), (1, 0.7), (4, 0.2)]] + [[] for _ in range(4)]
    return ds, Q, m, table_from_lists(lists, 3)


def test_single_cursor_takes_list_head():
    ds, Q, m, tab = single_token_setup()
    assert expand_candidates(0, Q, m, tab, 2, ds) == [3, 1]


def test_duplicates_are_skipped_without_using_a_slot():
    ds, Q, m, tab = single_token_setup()
    assert expand_candidates(0, Q, m, tab, 2, ds, visited={3}) == [1, 4]
    assert expand_candidates(0, Q, m, tab, 2, ds, exclude=[1, 3]) == [4]
    assert expand_candidates(0, Q, m, tab, 5, ds) == [3, 1, 4]


@given(seed=seeds, M=st.integers(1, 6))
def test_uniform_weights_select_global_top_by_base_score(seed, M):
    rng = np.random.default_rng(seed)
    c = 4
    ds = Dataset.from_multivectors([MultiVector(0, np.tile([[1.0, 0.0]], (c, 1)))] +
                                   [MultiVector(i, [[0.0, 1.0]]) for i in range(1, 13)])
    Q = MultiVector(0, [[1.0, 0.0]])
    _, m = usim_exact(Q, ds[0], SimilarityConfig(gamma=c))  # every slot matched equally
    assert np.ptp(contrib_all(c, Q, m)) == 0
    lists = []
    for _ in range(c):
        tg = rng.choice(np.arange(1, 13), 6, replace=False)
        sc = np.round(np.sort(rng.random(6))[::-1], 2)
        lists.append(sorted(zip(tg.tolist(), sc.tolist()), key=lambda e: (-e[1], e[0])))
    tab = table_from_lists(lists + [[] for _ in range(12)], 6)
    got = expand_candidates(0, Q, m, tab, M, ds)
    best = {}
    for entries in lists:
        for t, s in entries:
            best[t] = max(best.get(t, -1.0), s)
    want = sorted(best, key=lambda t: (-best[t], t))[:M]
    assert got == want


def test_expansion_matches_priority_oracle_on_1k_build(bundle_1k):
    idx, ant = bundle_1k.index, bundle_1k.ant
    ds = idx.dataset
    rng = np.random.default_rng(5)
    for _ in range(30):
        node = int(rng.integers(len(ds)))
        Q = ds[int(rng.integers(len(ds)))]
        _, m = usim_exact(Q, ds[node])
        s = ds.offsets[node]
        lists = [ant_entries(ant, s + i) for i in range(ds.counts[node])]
        c = contrib_all(ds.counts[node], Q, m)
        nb = [v for v, _ in idx.neighbors(node, 0)]
        got = expand_candidates(node, Q, m, ant, 8, ds, exclude=nb)
        assert got == oracles.priority_topm(c, lists, 8, excluded=nb)
        pr = expansion_priorities(node, Q, m, ant, ds)
        assert set(got) <= set(pr)


def ant_entries(ant, t):
    return [(int(ant.targets[t, r]), float(ant.scores[t, r])) for r in range(ant.lengths[t])]


# -- layer search ---------------------------------------------------------------------------------

def test_empty_table_reduces_to_plain(small_bundle, small_queries):
    idx = small_bundle.index
    empty = AntTable.empty(idx.dataset.n_tokens, idx.params.M)
    for Q in small_queries[:10]:
        plain = search_layer_plain(idx, Q, 0, [idx.entry], 24)
        assert augmented_search_layer(idx, empty, Q, 0, [idx.entry], 24) == plain
        a = knn_search(idx, empty, Q, SearchParams(k=10, ef_search=24, augmented=True))
        b = knn_search(idx, None, Q, SearchParams(k=10, ef_search=24, augmented=False))
        assert np.array_equal(a.ids, b.ids) and np.array_equal(a.scores, b.scores)
        assert a.n_scored == b.n_scored


def disconnected_instance():
    e = np.eye(4, dtype=np.float32)
    near_e3 = np.array([0, 0, 1, 0.1], dtype=np.float32)
    near_e3 /= np.linalg.norm(near_e3)
    objs = [
        [e[0]],
        [0.8 * e[0] + 0.6 * e[1]],
        [e[1], near_e3],
        [(e[0] + e[1]) / math.sqrt(2)],
        [(e[0] - e[1]) / math.sqrt(2)],
        [e[2]],  # the answer; no graph edges
    ]
    ds = Dataset.from_multivectors([MultiVector(i, np.array(o, dtype=np.float32)) for i, o in enumerate(objs)])
    idx = MvIndex(ds, IndexParams(M=2, ef_construction=2))
    idx._grow(6, 1)
    idx.levels = np.zeros(6, dtype=np.int32)
    for a, b in [(0, 1), (1, 2), (2, 3), (3, 4)]:
        w = edge_weight(ds[a], ds[b])
        for x, y in [(a, b), (b, a)]:
            idx.adj[0, x, idx.deg[0, x]] = y
            idx.adjw[0, x, idx.deg[0, x]] = w
            idx.deg[0, x] += 1
    idx.entry, idx.top = 0, 0
    ant = build_ant(ds, build_token_index(ds), M=2)
    return ds, idx, ant


def test_augmentation_reaches_disconnected_answer():
    ds, idx, ant = disconnected_instance()
    assert idx.audit() == []
    assert ant.targets[ds.offsets[2] + 1, 0] == 5
    Q = MultiVector(0, [[0, 0, 1, 0]])
    assert linear_scan_topk(ds, Q, 1)[0][0] == 5
    for backend in ("compiled", "reference"):
        plain = knn_search(idx, ant, Q, SearchParams(k=1, ef_search=6, augmented=False), backend)
        aug = knn_search(idx, ant, Q, SearchParams(k=1, ef_search=6, augmented=True), backend)
        assert plain.ids[0] != 5
        assert aug.ids[0] == 5 and aug.scores[0] == pytest.approx(1.0)


def test_layer_invariants_hold_every_iteration(bundle_1k, monkeypatch):
    idx, ant = bundle_1k.index, bundle_1k.ant
    ds = idx.dataset
    M = idx.params.M
    calls = Counter()
    real = S.usim_exact

    def counting(Q, V, sim=None):
        calls[V.id] += 1
        return real(Q, V, sim)

    monkeypatch.setattr(S, "usim_exact", counting)
    rng = np.random.default_rng(2)
    for _ in range(5):
        calls.clear()
        Q = ds[int(rng.integers(len(ds)))]
        ef = 32
        seen = []

        def observe(v, exn, cand):
            assert len(cand) <= ef
            assert len(exn) <= 2 * M
            assert len(set(exn)) == len(exn)
            seen.append(v)

        out = augmented_search_layer(idx, ant, Q, 0, [idx.entry], ef, observe=observe)
        assert seen
        assert max(calls.values()) == 1
        keys = [(-s, v) for v, s in out]
        assert keys == sorted(keys) and len(out) <= ef


# -- k-NN -----------------------------------------------------------------------------------------

def test_small_index_returns_everything_ranked():
    rng = np.random.default_rng(1)
    ds = Dataset.from_multivectors([MultiVector(i, random_unit(rng, 3, 8)) for i in range(6)])
    bundle_idx = build_index(ds, IndexParams(M=4, ef_construction=8))
    Q = MultiVector(0, random_unit(rng, 2, 8))
    res = knn_search(bundle_idx, None, Q, SearchParams(k=10, ef_search=10, augmented=False))
    scores = np.array([usim_exact(Q, ds[v])[0] for v in range(6)])
    assert res.ids.tolist() == oracles.exhaustive_topk(scores, 6)
    assert res.scores.tolist() == [scores[v] for v in res.ids]


def test_self_query_ranks_itself_first(small_bundle):
    idx, ant = small_bundle.index, small_bundle.ant
    for v in range(0, 300, 37):
        Q = idx.dataset[v]
        res = knn_search(idx, ant, Q, SearchParams(k=5, ef_search=32))
        assert res.ids[0] == v
        assert res.scores[0] == pytest.approx(len(Q), abs=1e-4)


@pytest.mark.parametrize("sim", [SimilarityConfig(), SimilarityConfig(gamma=2),
                                 SimilarityConfig(approx=True), SimilarityConfig(approx=True, exact_rerank=False)])
@pytest.mark.parametrize("augmented", [True, False])
def test_backends_are_bit_identical(small_bundle, small_queries, sim, augmented):
    idx, ant = small_bundle.index, small_bundle.ant
    p = SearchParams(k=10, ef_search=40, augmented=augmented, sim=sim)
    for Q in small_queries:
        a = knn_search(idx, ant, Q, p, "compiled")
        b = knn_search(idx, ant, Q, p, "reference")
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.scores, b.scores)
        assert (a.n_scored, a.distance_evals) == (b.n_scored, b.distance_evals)


def test_search_is_deterministic(small_bundle, small_queries):
    idx, ant = small_bundle.index, small_bundle.ant
    a = knn_search(idx, ant, small_queries[0])
    b = knn_search(idx, ant, small_queries[0])
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.scores, b.scores)


def test_exact_rerank_returns_exact_scores(small_bundle, small_queries):
    idx, ant = small_bundle.index, small_bundle.ant
    p = SearchParams(k=10, ef_search=40, sim=SimilarityConfig(approx=True))
    for Q in small_queries[:5]:
        res = knn_search(idx, ant, Q, p)
        assert res.scores.tolist() == [usim_exact(Q, idx.dataset[int(v)])[0] for v in res.ids]


def test_augmented_recall_not_below_plain_at_2k(bundle_2k, queries_2k):
    gt = ground_truth(bundle_2k.dataset, queries_2k, 10)
    aug = mean_recall(bundle_2k, queries_2k, gt, k=10, ef_search=128, augmented=True)
    plain = mean_recall(bundle_2k, queries_2k, gt, k=10, ef_search=128, augmented=False)
    assert aug >= plain
    assert aug >= 0.85


def test_recall_is_monotone_in_beam_width(bundle_2k, queries_2k):
    gt = ground_truth(bundle_2k.dataset, queries_2k, 10)
    for augmented in (True, False):
        narrow = mean_recall(bundle_2k, queries_2k, gt, k=10, ef_search=32, augmented=augmented)
        wide = mean_recall(bundle_2k, queries_2k, gt, k=10, ef_search=256, augmented=augmented)
        assert wide >= narrow - 0.02


def test_errors(small_bundle, small_queries):
    with pytest.raises(ValueError):
        SearchParams(k=0)
    with pytest.raises(ValueError):
        SearchParams(k=10, ef_search=5)
    empty = MvIndex(Dataset(2, np.zeros((0, 2), dtype=np.float32), np.zeros(1, dtype=np.int64),
                            np.zeros(0, dtype=np.float32)), IndexParams())
    with pytest.raises(RuntimeError):
        knn_search(empty, None, MultiVector(0, [[1, 0]]))
    with pytest.raises(ValueError):
        knn_search(small_bundle.index, small_bundle.ant, MultiVector(0, [[1, 0]]))
    with pytest.raises(ValueError):
        knn_search(small_bundle.index, small_bundle.ant, small_queries[0], backend="gpu")
