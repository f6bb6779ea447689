"""The multi-vector HNSW graph.

Nodes are whole multi-vectors. Edges are undirected and carry the symmetric
weight ``f(u, v) = (USim(u, v)/|u| + USim(v, u)/|v|) / 2``, which is also the
similarity used by the construction-time beam search. Each layer is a dense
``(n, M + 1)`` adjacency table; the spare slot holds a new edge until the
owner is trimmed back to ``M`` neighbours.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from mvann import _kernels as K
from mvann.approx import cluster_tokens, usim_approx
from mvann.core import Dataset, MultiVector, SimilarityConfig, usim_exact


@dataclass(frozen=True)
class IndexParams:
    M: int = 16
    ef_construction: int = 100
    m_L: float | None = None
    seed: int = 0
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)
    # construction routes a directional USim through the clustered kernel
    # when both objects have at least this many tokens; 0 disables it
    approx_min_tokens: int = 16

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < self.M:
            raise ValueError("ef_construction must be >= M")
        if self.m_L is None:
            object.__setattr__(self, "m_L", 1.0 / math.log(self.M))
        if not self.m_L > 0:
            raise ValueError("m_L must be positive")


def layer_from_uniform(u: float, m_L: float) -> int:
    return int(math.floor(-math.log(u) * m_L))


def assign_layer(rng: np.random.Generator, m_L: float) -> int:
    """Sample ``floor(-ln(U) * m_L)`` with ``U`` uniform on the open interval (0, 1)."""
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return layer_from_uniform(u, m_L)


def edge_weight(u: MultiVector, v: MultiVector, sim: SimilarityConfig | None = None,
                seed: int = 0) -> float:
    """Symmetric edge weight between two multi-vectors.

    Data-side token weights are honoured only when ``sim.use_weights``; the
    clustered kernel is used when ``sim.approx`` (clusterings seeded by ``seed``).
    """
    sim = sim or SimilarityConfig()
    if len(u) == 0 or len(v) == 0:
        raise ValueError("edge weight needs non-empty multi-vectors")
    if sim.approx:
        uv, _ = usim_approx(u, v, sim, cluster_tokens(u.tokens, seed))
        vu, _ = usim_approx(v, u, sim, cluster_tokens(v.tokens, seed))
    else:
        uv, _ = usim_exact(u, v, sim)
        vu, _ = usim_exact(v, u, sim)
    return 0.5 * (uv / len(u) + vu / len(v))


# -- compiled construction ---------------------------------------------------

@njit(cache=True)
def _usim_dir(a, b, use_approx, data, gamma, metric):
    toks, tt, offs, wts, cent, cent_off, assign, contrib, counter, e_idx, e_dist = data
    sa = offs[a]
    ea = offs[a + 1]
    sb = offs[b]
    eb = offs[b + 1]
    cb = eb - sb
    buf = contrib[:cb]
    buf[:] = 0.0
    if use_approx:
        return K.usim_approx(toks[sa:ea], wts[sa:ea], cent[cent_off[a]:cent_off[a + 1]], assign[sa:ea],
                             toks, tt, sb, eb, gamma, metric, buf, e_idx, e_dist, counter)
    counter[0] += (ea - sa) * cb
    return K.usim_exact(toks[sa:ea], wts[sa:ea], tt, sb, eb, gamma, metric, buf, e_idx, e_dist)


@njit(cache=True)
def _edge_weight(a, b, data, gamma, metric, approx_min):
    offs = data[2]
    ca = offs[a + 1] - offs[a]
    cb = offs[b + 1] - offs[b]
    use_approx = approx_min > 0 and ca >= approx_min and cb >= approx_min
    t1 = _usim_dir(a, b, use_approx, data, gamma, metric) / ca
    t2 = _usim_dir(b, a, use_approx, data, gamma, metric) / cb
    return 0.5 * (t1 + t2)


@njit(cache=True)
def _search_f(x, ep_ids, ep_sc, layer, ef, adj, deg, visited, stamp, data, gamma, metric, approx_min):
    cand = [(0.0, np.int64(0))]
    cand.pop()
    queue = [(0.0, np.int64(0))]
    queue.pop()
    for i in range(ep_ids.shape[0]):
        v = ep_ids[i]
        if visited[v] == stamp:
            continue
        visited[v] = stamp
        s = ep_sc[i]
        heapq.heappush(cand, (s, -v))
        heapq.heappush(queue, (-s, v))
        if len(cand) > ef:
            heapq.heappop(cand)
    while len(queue) > 0:
        negs, v = heapq.heappop(queue)
        if cand[0][0] > -negs:
            break
        for r in range(deg[layer, v]):
            u = np.int64(adj[layer, v, r])
            if visited[u] == stamp:
                continue
            visited[u] = stamp
            s = _edge_weight(x, u, data, gamma, metric, approx_min)
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
def _link(layer, a, b, w, adj, adjw, deg):
    d = deg[layer, a]
    adj[layer, a, d] = b
    adjw[layer, a, d] = w
    deg[layer, a] = d + 1


@njit(cache=True)
def _unlink(layer, a, b, adj, adjw, deg):
    d = deg[layer, a]
    for r in range(d):
        if adj[layer, a, r] == b:
            for s in range(r, d - 1):
                adj[layer, a, s] = adj[layer, a, s + 1]
                adjw[layer, a, s] = adjw[layer, a, s + 1]
            adj[layer, a, d - 1] = -1
            adjw[layer, a, d - 1] = 0.0
            deg[layer, a] = d - 1
            return


@njit(cache=True)
def _trim(layer, j, M, adj, adjw, deg):
    """Drop j's lowest-weight edges (ties: larger id first) from both endpoints until deg <= M."""
    while deg[layer, j] > M:
        worst = 0
        for r in range(1, deg[layer, j]):
            w = adjw[layer, j, r]
            bw = adjw[layer, j, worst]
            if w < bw or (w == bw and adj[layer, j, r] > adj[layer, j, worst]):
                worst = r
        x = adj[layer, j, worst]
        _unlink(layer, j, x, adj, adjw, deg)
        _unlink(layer, x, j, adj, adjw, deg)


@njit(cache=True)
def _insert(x, levels, state, adj, adjw, deg, M, efC, visited, stamp, data, gamma, metric, approx_min):
    lvl = levels[x]
    if state[1] < 0:
        state[0] = x
        state[1] = lvl
        return stamp
    top = state[1]
    ep_ids = np.empty(1, dtype=np.int64)
    ep_ids[0] = state[0]
    ep_sc = np.empty(1)
    ep_sc[0] = _edge_weight(x, ep_ids[0], data, gamma, metric, approx_min)
    for lc in range(top, lvl, -1):
        stamp += 1
        ids, sc = _search_f(x, ep_ids, ep_sc, lc, 1, adj, deg, visited, stamp, data, gamma, metric, approx_min)
        ep_ids = ids[:1].copy()
        ep_sc = sc[:1].copy()
    for lc in range(min(lvl, top), -1, -1):
        stamp += 1
        ids, sc = _search_f(x, ep_ids, ep_sc, lc, efC, adj, deg, visited, stamp, data, gamma, metric, approx_min)
        m = min(M, ids.shape[0])
        for r in range(m):
            _link(lc, x, ids[r], sc[r], adj, adjw, deg)
            _link(lc, ids[r], x, sc[r], adj, adjw, deg)
        for r in range(m):
            _trim(lc, ids[r], M, adj, adjw, deg)
        ep_ids = ids
        ep_sc = sc
    if lvl > top:
        state[0] = x
        state[1] = lvl
    return stamp


@njit(cache=True)
def _insert_range(lo, hi, levels, state, adj, adjw, deg, M, efC, visited, stamp, data, gamma, metric, approx_min):
    for x in range(lo, hi):
        stamp = _insert(x, levels, state, adj, adjw, deg, M, efC, visited, stamp, data, gamma, metric, approx_min)
    return stamp


def _object_seed(seed: int, i: int) -> list[int]:
    return [int(seed), int(i)]


class MvIndex:
    """Layered graph over the multi-vectors of a dataset."""

    def __init__(self, dataset: Dataset, params: IndexParams):
        self.dataset = dataset
        self.params = params
        self.levels = np.zeros(0, dtype=np.int32)
        self.adj = np.full((1, 0, params.M + 1), -1, dtype=np.int32)
        self.adjw = np.zeros((1, 0, params.M + 1))
        self.deg = np.zeros((1, 0), dtype=np.int32)
        self.entry = -1
        self.top = -1
        self.distance_evals = 0
        self._rng = np.random.default_rng(params.seed)
        self._cent = np.zeros((0, dataset.dim), dtype=np.float32)
        self._cent_off = np.zeros(1, dtype=np.int64)
        self._assign = np.zeros(0, dtype=np.int32)
        self._visited = np.zeros(0, dtype=np.int32)
        self._stamp = 0

    # -- construction --------------------------------------------------------

    @classmethod
    def build(cls, dataset: Dataset, params: IndexParams | None = None) -> "MvIndex":
        """Insert every object of ``dataset`` in id order."""
        params = params or IndexParams()
        index = cls(dataset, params)
        n = len(dataset)
        levels = np.array([assign_layer(index._rng, params.m_L) for _ in range(n)], dtype=np.int32)
        index._grow(n, int(levels.max()) + 1 if n else 1)
        index.levels = levels
        index._cluster_objects(0, n)
        index._run_inserts(0, n)
        return index

    def insert(self, mv: MultiVector) -> None:
        """Insert one new multi-vector; its id must be the next dense id."""
        n = self.n_nodes
        if mv.id < n:
            raise ValueError(f"multi-vector {mv.id} is already indexed")
        if mv.id != n:
            raise ValueError(f"expected id {n}, got {mv.id}")
        if mv.id >= len(self.dataset):
            self.dataset.append(mv)
        lvl = assign_layer(self._rng, self.params.m_L)
        self._grow(n + 1, max(self.adj.shape[0], lvl + 1))
        self.levels = np.append(self.levels, np.int32(lvl))
        self._cluster_objects(n, n + 1)
        self._run_inserts(n, n + 1)

    def _grow(self, n: int, L: int) -> None:
        oldL, oldn = self.deg.shape
        if n == oldn and L == oldL:
            return
        M1 = self.params.M + 1
        adj = np.full((L, n, M1), -1, dtype=np.int32)
        adjw = np.zeros((L, n, M1))
        deg = np.zeros((L, n), dtype=np.int32)
        adj[:oldL, :oldn] = self.adj
        adjw[:oldL, :oldn] = self.adjw
        deg[:oldL, :oldn] = self.deg
        self.adj, self.adjw, self.deg = adj, adjw, deg
        visited = np.zeros(n, dtype=np.int32)
        visited[:oldn] = self._visited
        self._visited = visited

    def _cluster_objects(self, lo: int, hi: int) -> None:
        ds = self.dataset
        amin = self.params.approx_min_tokens
        cents = [self._cent]
        offs = list(self._cent_off)
        assigns = [self._assign]
        for i in range(lo, hi):
            s, e = ds.offsets[i], ds.offsets[i + 1]
            if amin > 0 and e - s >= amin:
                cl = cluster_tokens(ds.tokens[s:e], _object_seed(self.params.seed, i))
                cents.append(cl.centroids)
                assigns.append(cl.assignment)
                offs.append(offs[-1] + cl.k)
            else:
                assigns.append(np.zeros(e - s, dtype=np.int32))
                offs.append(offs[-1])
        self._cent = np.ascontiguousarray(np.concatenate(cents), dtype=np.float32)
        self._cent_off = np.array(offs, dtype=np.int64)
        self._assign = np.concatenate(assigns).astype(np.int32)

    def _data(self):
        ds = self.dataset
        return (
            ds.tokens, ds.token_blocks, ds.offsets, ds.effective_weights(self.params.sim),
            self._cent, self._cent_off, self._assign,
            np.zeros(ds.max_tokens), np.zeros(1, dtype=np.int64),
            np.empty((0, 0), dtype=np.int64), np.empty((0, 0)),
        )

    def _run_inserts(self, lo: int, hi: int) -> None:
        sim = self.params.sim
        state = np.array([self.entry, self.top], dtype=np.int64)
        data = self._data()
        if self._stamp > 2**30:
            self._visited[:] = 0
            self._stamp = 0
        self._stamp = _insert_range(
            lo, hi, self.levels, state, self.adj, self.adjw, self.deg, self.params.M,
            self.params.ef_construction, self._visited, self._stamp, data, sim.gamma, sim.metric,
            self.params.approx_min_tokens,
        )
        self.distance_evals += int(data[8][0])
        self.entry, self.top = int(state[0]), int(state[1])

    # -- inspection ------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.levels.shape[0]

    @property
    def n_layers(self) -> int:
        return self.top + 1

    def neighbors(self, node: int, layer: int = 0) -> list[tuple[int, float]]:
        if layer > self.levels[node]:
            raise ValueError(f"node {node} is absent from layer {layer}")
        d = self.deg[layer, node]
        return [(int(self.adj[layer, node, r]), float(self.adjw[layer, node, r])) for r in range(d)]

    def edge_weight(self, a: int, b: int) -> float:
        """Edge weight between indexed objects, routed exactly as during construction."""
        sim = self.params.sim
        return float(_edge_weight(a, b, self._data(), sim.gamma, sim.metric, self.params.approx_min_tokens))

    def stats(self) -> dict:
        layers = []
        for lc in range(max(self.n_layers, 0)):
            members = np.flatnonzero(self.levels >= lc)
            degs = self.deg[lc, members]
            layers.append({
                "layer": lc,
                "nodes": int(members.shape[0]),
                "mean_degree": float(degs.mean()) if members.size else 0.0,
                "isolated": int(np.sum(degs == 0)) if members.size > 1 else 0,
            })
        return {"nodes": self.n_nodes, "entry_point": self.entry, "top_layer": self.top, "layers": layers}

    def audit(self) -> list[str]:
        """Structural violations: asymmetric edges, degree overflow, misplaced nodes or entry point."""
        problems: list[str] = []
        M = self.params.M
        n = self.n_nodes
        if n == 0:
            return problems
        if not 0 <= self.entry < n:
            return [f"entry point {self.entry} out of range"]
        if self.levels[self.entry] != self.top or self.top != int(self.levels.max()):
            problems.append(f"entry point {self.entry} (layer {self.levels[self.entry]}) is not at the top layer {int(self.levels.max())}")
        for lc in range(self.deg.shape[0]):
            for u in range(n):
                d = int(self.deg[lc, u])
                if d == 0:
                    continue
                if lc > self.levels[u]:
                    problems.append(f"node {u}: has edges on layer {lc} above its level {self.levels[u]}")
                    continue
                if d > M:
                    problems.append(f"node {u}: degree {d} exceeds M={M} on layer {lc}")
                    d = min(d, M + 1)
                seen = set()
                for r in range(d):
                    v = int(self.adj[lc, u, r])
                    w = self.adjw[lc, u, r]
                    if not 0 <= v < n or v == u:
                        problems.append(f"node {u}: invalid neighbour {v} on layer {lc}")
                        continue
                    if v in seen:
                        problems.append(f"node {u}: duplicate neighbour {v} on layer {lc}")
                    seen.add(v)
                    if lc > self.levels[v]:
                        problems.append(f"node {u}: neighbour {v} absent from layer {lc}")
                        continue
                    dv = min(int(self.deg[lc, v]), M + 1)
                    back = np.flatnonzero(self.adj[lc, v, :dv] == u)
                    if back.size == 0:
                        problems.append(f"node {u}: edge to {v} on layer {lc} has no reverse edge")
                    elif self.adjw[lc, v, back[0]] != w:
                        problems.append(f"node {u}: edge weight to {v} on layer {lc} differs from reverse edge")
        return problems


def build_index(dataset: Dataset, params: IndexParams | None = None) -> MvIndex:
    return MvIndex.build(dataset, params)


def insert(index: MvIndex, mv: MultiVector) -> MvIndex:
    index.insert(mv)
    return index
