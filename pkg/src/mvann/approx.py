"""Clustered filter-and-refine acceleration of USim.

The query's tokens are grouped into ``round(sqrt(|Q|))`` k-means clusters
once; every data object is then scored by letting each centroid keep its
``beta = max(gamma, ceil(sqrt(|D|)))`` closest data tokens and searching each
query token's gamma-NN only among its own cluster's survivors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mvann import _kernels as K
from mvann.core import MultiVector, ScoredMatch, SimilarityConfig, query_weights

KMEANS_ITERS = 10


@dataclass
class QueryClustering:
    centroids: np.ndarray  # (k, d) float32, unit norm
    assignment: np.ndarray  # (|Q|,) int32

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def n_clusters(c: int) -> int:
    return max(1, int(math.floor(math.sqrt(c) + 0.5)))


def cluster_tokens(tokens: np.ndarray, seed: int) -> QueryClustering:
    tokens = np.ascontiguousarray(tokens, dtype=np.float32)
    k = n_clusters(tokens.shape[0])
    u = np.random.default_rng(seed).random(k)
    cent, assign = K.kmeans(tokens, k, u, KMEANS_ITERS)
    return QueryClustering(cent, assign)


def cluster_query(Q: MultiVector, seed: int = 0) -> QueryClustering:
    if len(Q) < 1:
        raise ValueError("cannot cluster an empty multi-vector")
    return cluster_tokens(Q.tokens, seed)


def usim_approx(
    Q: MultiVector,
    D: MultiVector,
    cfg: SimilarityConfig | None = None,
    clustering: QueryClustering | None = None,
    counter: np.ndarray | None = None,
) -> tuple[float, ScoredMatch]:
    """Approximate USim(Q, D); pass ``counter`` (int64, length 1) to count distance evaluations."""
    cfg = cfg or SimilarityConfig()
    if len(D) == 0:
        raise ValueError("cannot score against an empty multi-vector")
    if Q.dim != D.dim:
        raise ValueError(f"dimension mismatch: {Q.dim} != {D.dim}")
    if clustering is None:
        clustering = cluster_query(Q)
    if clustering.assignment.shape[0] != len(Q):
        raise ValueError("clustering was not built from this query")
    if counter is None:
        counter = np.zeros(1, dtype=np.int64)
    c = len(D)
    beta = K.beta_for(c, cfg.gamma)
    g = min(cfg.gamma, beta, c)
    contrib = np.zeros(c)
    m_idx = np.empty((len(Q), g), dtype=np.int64)
    m_dist = np.empty((len(Q), g))
    score = K.usim_approx(
        Q.tokens,
        query_weights(Q, cfg),
        clustering.centroids,
        clustering.assignment,
        D.tokens,
        np.ascontiguousarray(D.tokens.T).ravel(),
        0,
        c,
        cfg.gamma,
        cfg.metric,
        contrib,
        m_idx,
        m_dist,
        counter,
    )
    return float(score), ScoredMatch(m_idx, m_dist)
