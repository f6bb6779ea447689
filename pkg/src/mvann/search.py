"""Query-time search over the multi-vector graph.

The base-layer beam search can expand each popped node beyond its graph
neighbours: every token of the node ranks the objects in its navigation-table
list by ``softmax(contrib)[token] * base_score`` and a lazy heap over those
sorted lists yields up to ``M`` unseen targets.

Two backends share one definition. ``compiled`` runs in numba; ``reference``
is plain Python built on the public scoring functions and is used as the
oracle for the compiled path. Both produce bit-identical results.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from mvann import _kernels as K
from mvann.ant import AntTable
from mvann.approx import QueryClustering, cluster_query, usim_approx
from mvann.core import Dataset, MultiVector, ScoredMatch, SimilarityConfig, query_weights, usim_exact
from mvann.graph import MvIndex

QUERY_CLUSTER_SEED = 0


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    ef_search: int = 128
    augmented: bool = True
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ef_search < self.k:
            raise ValueError(f"ef_search ({self.ef_search}) must be >= k ({self.k})")


@dataclass
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    n_scored: int = 0
    distance_evals: int = 0

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]


# -- contribution, weights and lazy expansion (reference definitions) ---------

def contrib(slot: int, Q: MultiVector, matches: ScoredMatch, sim: SimilarityConfig | None = None) -> float:
    """Weighted distance mass token ``slot`` of V receives from the query tokens that matched it."""
    sim = sim or SimilarityConfig()
    w = query_weights(Q, sim)
    total = 0.0
    for qi in range(matches.index.shape[0]):
        for r in range(matches.index.shape[1]):
            if matches.index[qi, r] == slot:
                total += w[qi] * matches.distance[qi, r]
    return total


def contrib_all(n_tokens: int, Q: MultiVector, matches: ScoredMatch, sim: SimilarityConfig | None = None) -> np.ndarray:
    """Contributions of every token of V, summed in the same order as the compiled kernel."""
    sim = sim or SimilarityConfig()
    w = query_weights(Q, sim)
    out = np.zeros(n_tokens)
    for qi in range(matches.index.shape[0]):
        for r in range(matches.index.shape[1]):
            out[matches.index[qi, r]] += w[qi] * matches.distance[qi, r]
    return out


def weight_softmax(contribs) -> np.ndarray:
    vals = [float(x) for x in contribs]
    if not vals:
        raise ValueError("softmax needs at least one value")
    m = max(vals)
    ex = [math.exp(x - m) for x in vals]
    tot = 0.0
    for x in ex:
        tot += x
    return np.array([x / tot for x in ex])


def expand_candidates(node: int, Q: MultiVector, matches: ScoredMatch, ant: AntTable, M: int,
                      dataset: Dataset, visited=(), exclude=(), sim: SimilarityConfig | None = None) -> list[int]:
    """Up to ``M`` distinct navigation-table targets of ``node``'s tokens, best priority first.

    Targets in ``visited`` or ``exclude`` (typically the graph neighbours) are
    skipped without using up a slot.
    """
    s, e = int(dataset.offsets[node]), int(dataset.offsets[node + 1])
    w = weight_softmax(contrib_all(e - s, Q, matches, sim))
    heap = []
    for i in range(e - s):
        if ant.lengths[s + i] > 0:
            heap.append((-(w[i] * ant.scores[s + i, 0]), int(ant.targets[s + i, 0]), i, 0))
    heapq.heapify(heap)
    visited = set(visited)
    exclude = set(exclude)
    out: list[int] = []
    while heap and len(out) < M:
        negp, tgt, i, pos = heapq.heappop(heap)
        if pos + 1 < ant.lengths[s + i]:
            nxt = pos + 1
            heapq.heappush(heap, (-(w[i] * ant.scores[s + i, nxt]), int(ant.targets[s + i, nxt]), i, nxt))
        if tgt in visited or tgt in exclude or tgt in out:
            continue
        out.append(tgt)
    return out


def expansion_priorities(node: int, Q: MultiVector, matches: ScoredMatch, ant: AntTable, dataset: Dataset,
                         sim: SimilarityConfig | None = None) -> dict[int, float]:
    """Every target in the union of ``node``'s token lists with its max-over-tokens priority."""
    s, e = int(dataset.offsets[node]), int(dataset.offsets[node + 1])
    w = weight_softmax(contrib_all(e - s, Q, matches, sim))
    best: dict[int, float] = {}
    for i in range(e - s):
        for pos in range(int(ant.lengths[s + i])):
            tgt = int(ant.targets[s + i, pos])
            p = w[i] * ant.scores[s + i, pos]
            if tgt not in best or p > best[tgt]:
                best[tgt] = p
    return best


class _RefScorer:
    """Per-query cache so each object is scored at most once."""

    def __init__(self, dataset: Dataset, Q: MultiVector, sim: SimilarityConfig):
        self.dataset = dataset
        self.Q = Q
        self.sim = sim
        self.clustering: QueryClustering | None = cluster_query(Q, QUERY_CLUSTER_SEED) if sim.approx else None
        self.cache: dict[int, tuple[float, ScoredMatch]] = {}
        self.counter = np.zeros(1, dtype=np.int64)
        self.order: list[int] = []

    def __call__(self, v: int) -> float:
        if v not in self.cache:
            D = self.dataset[v]
            if self.sim.approx:
                self.cache[v] = usim_approx(self.Q, D, self.sim, self.clustering, self.counter)
            else:
                self.cache[v] = usim_exact(self.Q, D, self.sim)
                self.counter[0] += len(self.Q) * len(D)
            self.order.append(v)
        return self.cache[v][0]


def _ref_layer(index: MvIndex, ant: AntTable | None, scorer: _RefScorer, layer: int,
               eps, ef: int, augment: bool, observe=None) -> list[tuple[int, float]]:
    cand: list[tuple[float, int]] = []
    queue: list[tuple[float, int]] = []
    visited: set[int] = set()
    for v in eps:
        v = int(v)
        if v in visited:
            continue
        visited.add(v)
        s = scorer(v)
        heapq.heappush(cand, (s, -v))
        heapq.heappush(queue, (-s, v))
        if len(cand) > ef:
            heapq.heappop(cand)
    M = index.params.M
    while queue:
        negs, v = heapq.heappop(queue)
        if cand[0][0] > -negs:
            break
        nb = [int(x) for x in index.adj[layer, v, : index.deg[layer, v]]]
        exn = list(nb)
        if augment and ant is not None and layer == 0:
            exn += expand_candidates(v, scorer.Q, scorer.cache[v][1], ant, M, index.dataset,
                                     visited, nb, scorer.sim)
        for u in exn:
            if u in visited:
                continue
            visited.add(u)
            s = scorer(u)
            if len(cand) < ef or s > cand[0][0]:
                heapq.heappush(cand, (s, -u))
                heapq.heappush(queue, (-s, u))
                if len(cand) > ef:
                    heapq.heappop(cand)
        if observe is not None:
            observe(v, exn, list(cand))
    return [(-nid, s) for s, nid in sorted(cand, key=lambda t: (-t[0], -t[1]))]


def search_layer_plain(index: MvIndex, Q: MultiVector, layer: int, eps, ef: int,
                       sim: SimilarityConfig | None = None) -> list[tuple[int, float]]:
    """Beam search over one layer scored by USim(Q, .); up to ``ef`` (id, score) best first."""
    if len(eps) == 0:
        raise ValueError("need at least one entry point")
    scorer = _RefScorer(index.dataset, Q, sim or index.params.sim)
    return _ref_layer(index, None, scorer, layer, eps, ef, False)


def augmented_search_layer(index: MvIndex, ant: AntTable, Q: MultiVector, layer: int, eps, ef: int,
                           sim: SimilarityConfig | None = None, observe=None) -> list[tuple[int, float]]:
    """Beam search that also follows navigation-table targets at the base layer.

    ``observe(node, expansion_set, cand_heap)`` is called after every expanded node.
    """
    if len(eps) == 0:
        raise ValueError("need at least one entry point")
    scorer = _RefScorer(index.dataset, Q, sim or index.params.sim)
    return _ref_layer(index, ant, scorer, layer, eps, ef, True, observe)


def _ref_knn(index: MvIndex, ant: AntTable | None, Q: MultiVector, params: SearchParams) -> SearchResult:
    scorer = _RefScorer(index.dataset, Q, params.sim)
    ep = [index.entry]
    for lc in range(index.top, 0, -1):
        ep = [_ref_layer(index, None, scorer, lc, ep, 1, False)[0][0]]
    cand = _ref_layer(index, ant, scorer, 0, ep, params.ef_search, params.augmented)
    n_scored = len(scorer.order)
    if params.sim.approx and params.sim.exact_rerank:
        cand = [(v, usim_exact(Q, index.dataset[v], params.sim)[0]) for v, _ in cand]
        cand.sort(key=lambda t: (-t[1], t[0]))
    cand = cand[: params.k]
    return SearchResult(np.array([v for v, _ in cand], dtype=np.int64), np.array([s for _, s in cand]),
                        n_scored, int(scorer.counter[0]))


# -- compiled backend -----------------------------------------------------------

@njit(cache=True)
def _score(v, qd, dd, gamma, metric, use_approx, st):
    qt, qw, cent, assign = qd
    toks, tt, offs = dd
    cstamp, cval, cbuf, counter, e_idx, e_dist = st
    if cstamp[v] == 1:
        return cval[v]
    s = offs[v]
    e = offs[v + 1]
    buf = cbuf[s:e]
    buf[:] = 0.0
    if use_approx:
        r = K.usim_approx(qt, qw, cent, assign, toks, tt, s, e, gamma, metric, buf, e_idx, e_dist, counter)
    else:
        counter[0] += qt.shape[0] * (e - s)
        r = K.usim_exact(qt, qw, tt, s, e, gamma, metric, buf, e_idx, e_dist)
    cstamp[v] = 1
    cval[v] = r
    counter[1] += 1
    return r


@njit(cache=True)
def _expand(v, layer, adj, deg, offs, ad, M, visited, stamp, cbuf, out):
    targets, ascores, alen = ad
    s = offs[v]
    c = offs[v + 1] - s
    w = np.empty(c)
    K.softmax(cbuf[s:s + c], w)
    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    for i in range(c):
        if alen[s + i] > 0:
            heap.append((-(w[i] * ascores[s + i, 0]), np.int64(targets[s + i, 0]), np.int64(i), np.int64(0)))
    heapq.heapify(heap)
    d = deg[layer, v]
    n = 0
    while len(heap) > 0 and n < M:
        negp, tgt, i, pos = heapq.heappop(heap)
        if pos + 1 < alen[s + i]:
            nxt = pos + 1
            heapq.heappush(heap, (-(w[i] * ascores[s + i, nxt]), np.int64(targets[s + i, nxt]), i, nxt))
        if visited[tgt] == stamp:
            continue
        dup = False
        for r in range(d):
            if adj[layer, v, r] == tgt:
                dup = True
                break
        if not dup:
            for r in range(n):
                if out[r] == tgt:
                    dup = True
                    break
        if dup:
            continue
        out[n] = tgt
        n += 1
    return n


@njit(cache=True)
def _layer(eps, layer, ef, augment, M, adj, deg, ad, qd, dd, gamma, metric, use_approx, st, visited, stamp):
    offs = dd[2]
    cbuf = st[2]
    cand = [(0.0, np.int64(0))]
    cand.pop()
    queue = [(0.0, np.int64(0))]
    queue.pop()
    for i in range(eps.shape[0]):
        v = np.int64(eps[i])
        if visited[v] == stamp:
            continue
        visited[v] = stamp
        s = _score(v, qd, dd, gamma, metric, use_approx, st)
        heapq.heappush(cand, (s, -v))
        heapq.heappush(queue, (-s, v))
        if len(cand) > ef:
            heapq.heappop(cand)
    ext = np.empty(M, dtype=np.int64)
    while len(queue) > 0:
        negs, v = heapq.heappop(queue)
        if cand[0][0] > -negs:
            break
        n_ext = 0
        if augment:
            n_ext = _expand(v, layer, adj, deg, offs, ad, M, visited, stamp, cbuf, ext)
        d = deg[layer, v]
        for r in range(d + n_ext):
            u = np.int64(adj[layer, v, r]) if r < d else ext[r - d]
            if visited[u] == stamp:
                continue
            visited[u] = stamp
            s = _score(u, qd, dd, gamma, metric, use_approx, st)
            if len(cand) < ef or s > cand[0][0]:
                heapq.heappush(cand, (s, -u))
                heapq.heappush(queue, (-s, u))
                if len(cand) > ef:
                    heapq.heappop(cand)
    m = len(cand)
    ids = np.empty(m, dtype=np.int64)
    sc = np.empty(m)
    for r in range(m - 1, -1, -1):
        s, negid = heapq.heappop(cand)
        ids[r] = -negid
        sc[r] = s
    return ids, sc


@njit(cache=True)
def _knn(entry, top, efS, augment, M, adj, deg, ad, qd, dd, gamma, metric, use_approx, counter):
    n = deg.shape[1]
    T = dd[0].shape[0]
    st = (np.zeros(n, dtype=np.int8), np.empty(n), np.empty(T), counter,
          np.empty((0, 0), dtype=np.int64), np.empty((0, 0)))
    visited = np.zeros(n, dtype=np.int32)
    stamp = 0
    ep = np.empty(1, dtype=np.int64)
    ep[0] = entry
    for lc in range(top, 0, -1):
        stamp += 1
        ids, _ = _layer(ep, lc, 1, False, M, adj, deg, ad, qd, dd, gamma, metric, use_approx, st, visited, stamp)
        ep = ids[:1].copy()
    stamp += 1
    return _layer(ep, 0, efS, augment, M, adj, deg, ad, qd, dd, gamma, metric, use_approx, st, visited, stamp)


_NO_ANT = (np.zeros((0, 1), dtype=np.int32), np.zeros((0, 1)), np.zeros(0, dtype=np.int32))


def _compiled_knn(index: MvIndex, ant: AntTable | None, Q: MultiVector, params: SearchParams) -> SearchResult:
    ds = index.dataset
    sim = params.sim
    augment = bool(params.augmented and ant is not None)
    if augment and ant.n_tokens != ds.n_tokens:
        raise ValueError("navigation table does not match the dataset")
    if sim.approx:
        cl = cluster_query(Q, QUERY_CLUSTER_SEED)
        cent, assign = cl.centroids, cl.assignment
    else:
        cent, assign = np.zeros((1, ds.dim), dtype=np.float32), np.zeros(len(Q), dtype=np.int32)
    qd = (Q.tokens, query_weights(Q, sim), cent, assign)
    dd = (ds.tokens, ds.token_blocks, ds.offsets)
    ad = (ant.targets, ant.scores, ant.lengths) if augment else _NO_ANT
    counter = np.zeros(2, dtype=np.int64)
    ids, sc = _knn(index.entry, index.top, params.ef_search, augment, index.params.M, index.adj, index.deg,
                   ad, qd, dd, sim.gamma, sim.metric, sim.approx, counter)
    if sim.approx and sim.exact_rerank:
        sc = np.array([usim_exact(Q, ds[int(v)], sim)[0] for v in ids])
        order = np.lexsort((ids, -sc))
        ids, sc = ids[order], sc[order]
    k = params.k
    return SearchResult(ids[:k].copy(), sc[:k].copy(), int(counter[1]), int(counter[0]))


def knn_search(index: MvIndex, ant: AntTable | None, Q: MultiVector, params: SearchParams | None = None,
               backend: str = "compiled") -> SearchResult:
    """Top-k objects for ``Q``: greedy descent through upper layers, then one base-layer beam search."""
    params = params or SearchParams(sim=index.params.sim)
    if index.n_nodes == 0 or index.entry < 0:
        raise RuntimeError("index is empty")
    if Q.dim != index.dataset.dim:
        raise ValueError(f"dimension mismatch: {Q.dim} != {index.dataset.dim}")
    if backend == "compiled":
        return _compiled_knn(index, ant, Q, params)
    if backend == "reference":
        return _ref_knn(index, ant, Q, params)
    raise ValueError(f"unknown backend {backend!r}")
