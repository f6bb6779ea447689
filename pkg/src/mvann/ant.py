"""Auxiliary navigation table: per token, a short list of globally relevant objects.

For token ``v`` of object ``V`` the table retrieves the ``M' = 5M`` nearest
tokens outside ``V``, groups them by owner, scores each owner by the sum of
its ``min(gamma, group size)`` best distances, and keeps the top ``M`` owners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from mvann.core import Dataset
from mvann.token_index import TokenIndex, _knn

EXPANSION_FACTOR = 5

# the default layer probes TBB first and warns when the installed one is too old
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "workqueue"


@dataclass
class AntTable:
    targets: np.ndarray  # (T, M) int32, -1 padded
    scores: np.ndarray  # (T, M) float64
    lengths: np.ndarray  # (T,) int32
    M: int
    gamma: int
    M_prime: int

    @property
    def n_tokens(self) -> int:
        return self.lengths.shape[0]

    @property
    def n_entries(self) -> int:
        return int(self.lengths.sum())

    @classmethod
    def empty(cls, n_tokens: int, M: int, gamma: int = 1) -> "AntTable":
        return cls(
            np.full((n_tokens, M), -1, dtype=np.int32),
            np.zeros((n_tokens, M)),
            np.zeros(n_tokens, dtype=np.int32),
            M,
            gamma,
            EXPANSION_FACTOR * M,
        )


@njit(cache=True)
def _group_top(ids, sc, owner, gamma, M, out_t, out_s):
    n = ids.shape[0]
    own = np.empty(n, dtype=np.int64)
    cnt = np.zeros(n, dtype=np.int64)
    tot = np.zeros(n)
    g = 0
    # ids arrive best first, so an owner's first gamma hits are its top-gamma
    for r in range(n):
        o = owner[ids[r]]
        slot = -1
        for i in range(g):
            if own[i] == o:
                slot = i
                break
        if slot < 0:
            slot = g
            own[g] = o
            g += 1
        if cnt[slot] < gamma:
            tot[slot] += sc[r]
            cnt[slot] += 1
    keep = min(M, g)
    used = np.zeros(g, dtype=np.bool_)
    for r in range(keep):
        best = -1
        for i in range(g):
            if used[i]:
                continue
            if best < 0 or tot[i] > tot[best] or (tot[i] == tot[best] and own[i] < own[best]):
                best = i
        used[best] = True
        out_t[r] = own[best]
        out_s[r] = tot[best]
    return keep


@njit(cache=True, parallel=True)
def _build_ant(toks, owner, metric, entry, top, adj0, deg0, adjU, degU, upper_row,
               k, ef, gamma, M, n_chunks, targets, scores, lengths):
    T = toks.shape[0]
    step = (T + n_chunks - 1) // n_chunks
    for ch in prange(n_chunks):
        lo = ch * step
        hi = min(T, lo + step)
        visited = np.zeros(T, dtype=np.int32)
        stamp = 0
        for t in range(lo, hi):
            ids, sc, stamp = _knn(toks[t], k, ef, owner[t], owner, toks, metric, entry, top,
                                  adj0, deg0, adjU, degU, upper_row, visited, stamp)
            lengths[t] = _group_top(ids, sc, owner, gamma, M, targets[t], scores[t])


def build_ant(dataset: Dataset, token_index: TokenIndex, M: int, gamma: int = 1,
              threads: int = 1) -> AntTable:
    if M < 1 or gamma < 1:
        raise ValueError("M and gamma must be >= 1")
    table = AntTable.empty(dataset.n_tokens, M, gamma)
    k = table.M_prime
    ef = max(k, token_index.params.ef_search) + dataset.max_tokens
    threads = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    prev = numba.get_num_threads()
    numba.set_num_threads(threads)
    try:
        _build_ant(
            dataset.tokens, dataset.owner, token_index.metric, token_index.entry, token_index.top,
            token_index.adj0, token_index.deg0, token_index.adjU, token_index.degU, token_index.upper_row,
            k, ef, gamma, M, threads, table.targets, table.scores, table.lengths,
        )
    finally:
        numba.set_num_threads(prev)
    return table


def ant_lookup(table: AntTable, ref: tuple[int, int], dataset: Dataset) -> list[tuple[int, float]]:
    """The stored (target id, base score) list of token ``ref = (owner, slot)``."""
    owner, slot = ref
    if not 0 <= owner < len(dataset):
        raise ValueError(f"unknown multi-vector {owner}")
    if not 0 <= slot < dataset.counts[owner]:
        raise ValueError(f"multi-vector {owner} has no token {slot}")
    t = int(dataset.offsets[owner] + slot)
    n = int(table.lengths[t])
    return [(int(table.targets[t, i]), float(table.scores[t, i])) for i in range(n)]
