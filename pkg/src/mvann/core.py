"""Domain types and the exact unified multi-vector similarity.

Token vectors are stored as float32; every distance accumulates in float64
in ascending coordinate order, and every USim sums per-query-token terms in
ascending token order, so scores are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from mvann import _kernels as K


class FormatError(ValueError):
    """A malformed or inconsistent file; the message names the byte offset."""


class Distance(str, Enum):
    INNER_PRODUCT = "inner-product"
    NEGATIVE_EUCLIDEAN = "negative-euclidean"

    @property
    def code(self) -> int:
        return K.IP if self is Distance.INNER_PRODUCT else K.NEG_L2


@dataclass(frozen=True)
class SimilarityConfig:
    """Parameters threaded through every scoring call.

    ``gamma`` is the neighbour count per query token, ``use_weights`` decides
    whether per-token weights are honoured (otherwise every weight is 1),
    ``approx`` routes query scoring through the clustered kernel and
    ``exact_rerank`` re-scores the final candidates exactly.
    """

    gamma: int = 1
    distance: Distance = Distance.INNER_PRODUCT
    use_weights: bool = False
    approx: bool = False
    exact_rerank: bool = True

    def __post_init__(self):
        if int(self.gamma) < 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        object.__setattr__(self, "gamma", int(self.gamma))
        object.__setattr__(self, "distance", Distance(self.distance))

    @property
    def metric(self) -> int:
        return self.distance.code


def metric_preset(name: str, gamma: int | None = None, **overrides) -> SimilarityConfig:
    """Named instantiations of USim: ``maxsim``, ``weighted-chamfer``, ``aggregate-gnn``."""
    key = name.lower().replace("_", "-")
    if key == "maxsim":
        cfg = SimilarityConfig(gamma=1, use_weights=False)
    elif key in ("weighted-chamfer", "chamfer"):
        cfg = SimilarityConfig(gamma=1, use_weights=True)
    elif key in ("aggregate-gnn", "agg-gnn"):
        if gamma is None or gamma <= 1:
            raise ValueError("aggregate-gnn requires gamma > 1")
        cfg = SimilarityConfig(gamma=gamma, use_weights=False)
    else:
        raise ValueError(f"unknown metric preset {name!r}")
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class MultiVector:
    id: int
    tokens: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        tokens = np.ascontiguousarray(np.asarray(self.tokens, dtype=np.float32))
        if tokens.ndim == 1:
            tokens = tokens.reshape(1, -1)
        if tokens.ndim != 2 or tokens.shape[0] < 1 or tokens.shape[1] < 1:
            raise ValueError(f"multi-vector {self.id}: expected a non-empty (c, d) token array")
        if not np.all(np.isfinite(tokens)):
            raise ValueError(f"multi-vector {self.id}: non-finite token coordinates")
        if self.weights is None:
            weights = np.ones(tokens.shape[0], dtype=np.float32)
        else:
            weights = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        if weights.shape != (tokens.shape[0],):
            raise ValueError(f"multi-vector {self.id}: {weights.shape[0]} weights for {tokens.shape[0]} tokens")
        if np.any(weights < 0) or np.any(weights > 1) or not np.all(np.isfinite(weights)):
            raise ValueError(f"multi-vector {self.id}: weights must lie in [0, 1]")
        self.id = int(self.id)
        self.tokens = tokens
        self.weights = weights

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ScoredMatch:
    """Per query token, the gamma-NN assignment found while computing USim.

    Row ``i`` holds ``min(gamma, |V|)`` (token index, distance) pairs sorted by
    distance descending, ties by smaller token index.
    """

    index: np.ndarray
    distance: np.ndarray

    def pairs(self, qi: int) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.index[qi], self.distance[qi])]


@dataclass
class Dataset:
    """A collection of multi-vectors with dense ids, stored as flat arrays.

    ``tokens`` is (T, d) float32, ``offsets`` (n + 1,) int64 and ``weights``
    (T,) float32. Object ``i`` owns rows ``offsets[i]:offsets[i + 1]``.
    """

    dim: int
    tokens: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray
    normalized: bool = False
    has_weights: bool = False
    _blocks: np.ndarray | None = field(default=None, repr=False, compare=False)
    _owner: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32).reshape(-1, self.dim)
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.offsets.ndim != 1 or self.offsets[0] != 0 or self.offsets[-1] != self.tokens.shape[0]:
            raise ValueError("offsets must start at 0 and end at the token count")
        if np.any(np.diff(self.offsets) < 1):
            raise ValueError("every multi-vector needs at least one token")
        if self.weights.shape != (self.tokens.shape[0],):
            raise ValueError("one weight per token required")
        if self.normalized:
            norms = np.linalg.norm(self.tokens.astype(np.float64), axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > 1e-4:
                raise ValueError("dataset flagged normalized but token norms deviate from 1")

    @classmethod
    def from_multivectors(
        cls, objects: Iterable[MultiVector | np.ndarray], normalized: bool | None = None
    ) -> "Dataset":
        mvs = [o if isinstance(o, MultiVector) else MultiVector(i, o) for i, o in enumerate(objects)]
        if not mvs:
            raise ValueError("dataset must contain at least one multi-vector")
        for i, mv in enumerate(mvs):
            if mv.id != i:
                raise ValueError(f"ids must be dense 0..n-1; position {i} has id {mv.id}")
        dim = mvs[0].dim
        if any(mv.dim != dim for mv in mvs):
            raise ValueError("all token vectors must share one dimension")
        tokens = np.concatenate([mv.tokens for mv in mvs])
        weights = np.concatenate([mv.weights for mv in mvs])
        offsets = np.zeros(len(mvs) + 1, dtype=np.int64)
        np.cumsum([len(mv) for mv in mvs], out=offsets[1:])
        if normalized is None:
            norms = np.linalg.norm(tokens.astype(np.float64), axis=1)
            normalized = bool(np.all(np.abs(norms - 1.0) <= 1e-4))
        return cls(
            dim=dim,
            tokens=tokens,
            offsets=offsets,
            weights=weights,
            normalized=normalized,
            has_weights=bool(np.any(weights != 1.0)),
        )

    def __len__(self) -> int:
        return self.offsets.shape[0] - 1

    def __getitem__(self, i: int) -> MultiVector:
        if not 0 <= i < len(self):
            raise IndexError(i)
        s, e = self.offsets[i], self.offsets[i + 1]
        return MultiVector(i, self.tokens[s:e], self.weights[s:e])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def max_tokens(self) -> int:
        return int(self.counts.max())

    @property
    def token_blocks(self) -> np.ndarray:
        """Flat copy of the tokens with every object's (c, d) rows stored transposed."""
        if self._blocks is None:
            self._blocks = np.concatenate(
                [self.tokens[s:e].T.ravel() for s, e in zip(self.offsets[:-1], self.offsets[1:])]
            )
        return self._blocks

    @property
    def owner(self) -> np.ndarray:
        if self._owner is None:
            self._owner = np.repeat(np.arange(len(self), dtype=np.int32), self.counts)
        return self._owner

    def token_ref(self, t: int) -> tuple[int, int]:
        owner = int(self.owner[t])
        return owner, int(t - self.offsets[owner])

    def effective_weights(self, sim: SimilarityConfig) -> np.ndarray:
        if sim.use_weights:
            return self.weights.astype(np.float64)
        return np.ones(self.n_tokens, dtype=np.float64)

    def append(self, mv: MultiVector) -> None:
        if mv.id != len(self):
            raise ValueError(f"expected id {len(self)}, got {mv.id}")
        if mv.dim != self.dim:
            raise ValueError(f"dimension mismatch: {mv.dim} != {self.dim}")
        self.tokens = np.concatenate([self.tokens, mv.tokens])
        self.weights = np.concatenate([self.weights, mv.weights])
        self.offsets = np.append(self.offsets, self.offsets[-1] + len(mv))
        self.has_weights = self.has_weights or bool(np.any(mv.weights != 1.0))
        if self.normalized:
            norms = np.linalg.norm(mv.tokens.astype(np.float64), axis=1)
            self.normalized = bool(np.all(np.abs(norms - 1.0) <= 1e-4))
        self._blocks = None
        self._owner = None


def l2_normalize(tokens: np.ndarray) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return (x / norms).astype(np.float32)


def query_weights(Q: MultiVector, sim: SimilarityConfig) -> np.ndarray:
    if sim.use_weights:
        return Q.weights.astype(np.float64)
    return np.ones(len(Q), dtype=np.float64)


def _as_tokens(v) -> np.ndarray:
    if isinstance(v, MultiVector):
        return v.tokens
    a = np.ascontiguousarray(np.asarray(v, dtype=np.float32))
    return a.reshape(1, -1) if a.ndim == 1 else a


def dis(u: Sequence[float], v: Sequence[float], cfg: SimilarityConfig | None = None) -> float:
    """Token similarity: inner product, or negated Euclidean distance. Larger is closer."""
    cfg = cfg or SimilarityConfig()
    a = np.ascontiguousarray(np.asarray(u, dtype=np.float32)).ravel()
    b = np.ascontiguousarray(np.asarray(v, dtype=np.float32)).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} != {b.shape[0]}")
    return float(K.dis(a, b, cfg.metric))


def gamma_nn_exact(
    q: Sequence[float], V: MultiVector | np.ndarray, gamma: int, cfg: SimilarityConfig | None = None
) -> list[tuple[int, float]]:
    """The ``min(gamma, |V|)`` tokens of ``V`` closest to ``q``, best first."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    cfg = cfg or SimilarityConfig()
    toks = _as_tokens(V)
    qt = _as_tokens(q)
    if qt.shape != (1, toks.shape[1]):
        raise ValueError("dimension mismatch between query token and multi-vector")
    _, match = _usim(qt, np.ones(1), toks, replace(cfg, gamma=gamma))
    return match.pairs(0)


def _usim(qt, qw, toks, cfg: SimilarityConfig):
    if toks.shape[0] == 0:
        raise ValueError("cannot score against an empty multi-vector")
    if qt.shape[0] == 0:
        raise ValueError("empty query multi-vector")
    if qt.shape[1] != toks.shape[1]:
        raise ValueError(f"dimension mismatch: {qt.shape[1]} != {toks.shape[1]}")
    c = toks.shape[0]
    g = min(cfg.gamma, c)
    toks_t = np.ascontiguousarray(toks.T).ravel()
    contrib = np.zeros(c)
    m_idx = np.empty((qt.shape[0], g), dtype=np.int64)
    m_dist = np.empty((qt.shape[0], g))
    score = K.usim_exact(qt, qw, toks_t, 0, c, cfg.gamma, cfg.metric, contrib, m_idx, m_dist)
    return float(score), ScoredMatch(m_idx, m_dist)


def usim_exact(Q: MultiVector, V: MultiVector, cfg: SimilarityConfig | None = None) -> tuple[float, ScoredMatch]:
    """Exact USim(Q, V) and the gamma-NN assignment of every query token.

    Each query token contributes its weight times the mean distance to its
    ``min(gamma, |V|)`` nearest tokens of ``V``.
    """
    cfg = cfg or SimilarityConfig()
    return _usim(Q.tokens, query_weights(Q, cfg), V.tokens, cfg)
