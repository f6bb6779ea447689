"""Single-vector HNSW over every token of a dataset.

Used to build the auxiliary navigation table; nodes are global token rows in
ascending (owner, slot) order. Layer 0 is a dense (T, M_t) table, upper
layers live in a compact table indexed through ``upper_row``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from mvann import _kernels as K
from mvann.core import Dataset, SimilarityConfig


@dataclass(frozen=True)
class TokenHnswParams:
    M: int = 32
    ef_construction: int = 40
    ef_search: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("token HNSW needs M >= 2")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")


@njit(cache=True)
def _neighbors(t, layer, adj0, deg0, adjU, degU, upper_row):
    if layer == 0:
        return adj0[t, : deg0[t]]
    r = upper_row[t]
    return adjU[r, layer - 1, : degU[r, layer - 1]]


@njit(cache=True)
def _search_layer(q, eps, layer, ef, toks, metric, adj0, deg0, adjU, degU, upper_row, visited, stamp):
    cand = [(0.0, np.int64(0))]
    cand.pop()
    queue = [(0.0, np.int64(0))]
    queue.pop()
    for t in eps:
        if visited[t] == stamp:
            continue
        visited[t] = stamp
        s = K.dis(q, toks[t], metric)
        heapq.heappush(cand, (s, -np.int64(t)))
        heapq.heappush(queue, (-s, np.int64(t)))
        if len(cand) > ef:
            heapq.heappop(cand)
    while len(queue) > 0:
        negs, v = heapq.heappop(queue)
        if cand[0][0] > -negs:
            break
        nb = _neighbors(v, layer, adj0, deg0, adjU, degU, upper_row)
        for u in nb:
            if visited[u] == stamp:
                continue
            visited[u] = stamp
            s = K.dis(q, toks[u], metric)
            if len(cand) < ef or s > cand[0][0]:
                heapq.heappush(cand, (s, -np.int64(u)))
                heapq.heappush(queue, (-s, np.int64(u)))
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
def _heuristic(ids, sc, M, toks, metric, out):
    """Keep candidates (sorted by similarity to the base) not closer to an already kept one."""
    n = 0
    for i in range(ids.shape[0]):
        c = ids[i]
        good = True
        for r in range(n):
            if K.dis(toks[c], toks[out[r]], metric) > sc[i]:
                good = False
                break
        if good:
            out[n] = c
            n += 1
            if n == M:
                break
    return n


@njit(cache=True)
def _set_neighbors(t, layer, sel, n, adj0, deg0, adjU, degU, upper_row):
    if layer == 0:
        adj0[t, :] = -1
        for i in range(n):
            adj0[t, i] = sel[i]
        deg0[t] = n
    else:
        r = upper_row[t]
        adjU[r, layer - 1, :] = -1
        for i in range(n):
            adjU[r, layer - 1, i] = sel[i]
        degU[r, layer - 1] = n


@njit(cache=True)
def _connect_back(e, t, layer, M, toks, metric, adj0, deg0, adjU, degU, upper_row, buf):
    nb = _neighbors(e, layer, adj0, deg0, adjU, degU, upper_row)
    d = nb.shape[0]
    if d < M:
        if layer == 0:
            adj0[e, d] = t
            deg0[e] = d + 1
        else:
            r = upper_row[e]
            adjU[r, layer - 1, d] = t
            degU[r, layer - 1] = d + 1
        return
    ids = np.empty(d + 1, dtype=np.int64)
    sc = np.empty(d + 1)
    for i in range(d):
        ids[i] = nb[i]
        sc[i] = K.dis(toks[e], toks[nb[i]], metric)
    ids[d] = t
    sc[d] = K.dis(toks[e], toks[t], metric)
    # stable order: similarity descending, id ascending
    order = np.argsort(ids, kind="mergesort")
    ids = ids[order]
    sc = sc[order]
    order = np.argsort(-sc, kind="mergesort")
    ids = ids[order]
    sc = sc[order]
    n = _heuristic(ids, sc, M, toks, metric, buf)
    _set_neighbors(e, layer, buf, n, adj0, deg0, adjU, degU, upper_row)


@njit(cache=True)
def _build(toks, metric, levels, upper_row, adj0, deg0, adjU, degU, M, efC, state, visited):
    T = toks.shape[0]
    buf = np.empty(M, dtype=np.int64)
    stamp = 0
    for t in range(T):
        lvl = levels[t]
        if state[1] < 0:
            state[0] = t
            state[1] = lvl
            continue
        top = state[1]
        ep = np.empty(1, dtype=np.int64)
        ep[0] = state[0]
        q = toks[t]
        for lc in range(top, lvl, -1):
            stamp += 1
            ids, _ = _search_layer(q, ep, lc, 1, toks, metric, adj0, deg0, adjU, degU, upper_row, visited, stamp)
            ep = ids[:1]
        for lc in range(min(lvl, top), -1, -1):
            stamp += 1
            ids, sc = _search_layer(q, ep, lc, efC, toks, metric, adj0, deg0, adjU, degU, upper_row, visited, stamp)
            n = _heuristic(ids, sc, M, toks, metric, buf)
            sel = buf[:n].copy()
            _set_neighbors(t, lc, sel, n, adj0, deg0, adjU, degU, upper_row)
            for i in range(n):
                _connect_back(sel[i], t, lc, M, toks, metric, adj0, deg0, adjU, degU, upper_row, buf)
            ep = ids
        if lvl > top:
            state[0] = t
            state[1] = lvl
    return stamp


@njit(cache=True)
def _knn(q, k, ef, exclude_owner, owner, toks, metric, entry, top, adj0, deg0, adjU, degU, upper_row, visited, stamp):
    ep = np.empty(1, dtype=np.int64)
    ep[0] = entry
    for lc in range(top, 0, -1):
        stamp += 1
        ids, _ = _search_layer(q, ep, lc, 1, toks, metric, adj0, deg0, adjU, degU, upper_row, visited, stamp)
        ep = ids[:1]
    stamp += 1
    ids, sc = _search_layer(q, ep, 0, ef, toks, metric, adj0, deg0, adjU, degU, upper_row, visited, stamp)
    out_i = np.empty(k, dtype=np.int64)
    out_s = np.empty(k)
    n = 0
    for r in range(ids.shape[0]):
        if exclude_owner >= 0 and owner[ids[r]] == exclude_owner:
            continue
        out_i[n] = ids[r]
        out_s[n] = sc[r]
        n += 1
        if n == k:
            break
    return out_i[:n], out_s[:n], stamp


class TokenIndex:
    """HNSW graph over all token vectors of a dataset."""

    def __init__(self, dataset: Dataset, params: TokenHnswParams, metric: int,
                 levels, upper_row, adj0, deg0, adjU, degU, entry: int, top: int):
        self.dataset = dataset
        self.params = params
        self.metric = metric
        self.levels = levels
        self.upper_row = upper_row
        self.adj0 = adj0
        self.deg0 = deg0
        self.adjU = adjU
        self.degU = degU
        self.entry = entry
        self.top = top
        self._visited = np.zeros(dataset.n_tokens, dtype=np.int32)
        self._stamp = 0

    @property
    def size(self) -> int:
        return self.levels.shape[0]

    def neighbors(self, t: int, layer: int = 0) -> np.ndarray:
        if layer > self.levels[t]:
            raise ValueError(f"token {t} is absent from layer {layer}")
        return _neighbors(t, layer, self.adj0, self.deg0, self.adjU, self.degU, self.upper_row)

    def new_visited(self) -> np.ndarray:
        return np.zeros(self.size, dtype=np.int32)

    def knn_rows(self, q: np.ndarray, k: int, ef: int, exclude_owner: int = -1):
        """(global token rows, distances) best first; rows owned by ``exclude_owner`` are dropped."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if ef < k:
            raise ValueError("ef must be >= k")
        q = np.ascontiguousarray(np.asarray(q, dtype=np.float32).ravel())
        if q.shape[0] != self.dataset.dim:
            raise ValueError("dimension mismatch")
        if self._stamp > 2**30:
            self._visited[:] = 0
            self._stamp = 0
        ef_eff = ef + (self.dataset.max_tokens if exclude_owner >= 0 else 0)
        ids, sc, self._stamp = _knn(
            q, k, ef_eff, exclude_owner, self.dataset.owner, self.dataset.tokens, self.metric,
            self.entry, self.top, self.adj0, self.deg0, self.adjU, self.degU, self.upper_row,
            self._visited, self._stamp,
        )
        return ids, sc


def build_token_index(dataset: Dataset, params: TokenHnswParams | None = None,
                      sim: SimilarityConfig | None = None) -> TokenIndex:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = params or TokenHnswParams()
    sim = sim or SimilarityConfig()
    T = dataset.n_tokens
    rng = np.random.default_rng(params.seed)
    mL = 1.0 / math.log(params.M)
    u = 1.0 - rng.random(T)  # (0, 1]
    levels = np.floor(-np.log(u) * mL).astype(np.int32)
    L = int(levels.max())
    upper = np.flatnonzero(levels > 0)
    upper_row = np.full(T, -1, dtype=np.int64)
    upper_row[upper] = np.arange(upper.shape[0])
    adj0 = np.full((T, params.M), -1, dtype=np.int64)
    deg0 = np.zeros(T, dtype=np.int32)
    adjU = np.full((max(1, upper.shape[0]), max(1, L), params.M), -1, dtype=np.int64)
    degU = np.zeros((max(1, upper.shape[0]), max(1, L)), dtype=np.int32)
    state = np.array([-1, -1], dtype=np.int64)
    visited = np.zeros(T, dtype=np.int32)
    _build(dataset.tokens, sim.metric, levels, upper_row, adj0, deg0, adjU, degU,
           params.M, params.ef_construction, state, visited)
    return TokenIndex(dataset, params, sim.metric, levels, upper_row, adj0, deg0, adjU, degU,
                      int(state[0]), int(state[1]))


def token_knn(index: TokenIndex, q, k: int, ef: int | None = None,
              exclude_owner: int | None = None) -> list[tuple[tuple[int, int], float]]:
    """Up to ``k`` (TokenRef, distance) pairs, best first, as ((owner, slot), distance)."""
    ef = max(k, index.params.ef_search) if ef is None else ef
    ids, sc = index.knn_rows(q, k, ef, -1 if exclude_owner is None else int(exclude_owner))
    return [(index.dataset.token_ref(int(t)), float(s)) for t, s in zip(ids, sc)]
