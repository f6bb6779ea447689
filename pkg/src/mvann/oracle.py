"""Exact linear-scan ground truth, recall, and the ``.mvgt`` ground-truth file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from mvann import _kernels as K
from mvann.core import Dataset, FormatError, MultiVector, SimilarityConfig, query_weights

GT_MAGIC = b"MVGT"
GT_VERSION = 1
_GT_HEADER = struct.Struct("<4sHIQ")
_GT_ROW = np.dtype([("id", "<u8"), ("score", "<f8")])


@dataclass
class GroundTruth:
    ids: np.ndarray  # (n_queries, k) int64
    scores: np.ndarray  # (n_queries, k) float64

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def row(self, i: int) -> list[tuple[int, float]]:
        return [(int(a), float(b)) for a, b in zip(self.ids[i], self.scores[i])]


@njit(cache=True)
def _scan(qt, qw, tt, offs, gamma, metric, max_tokens):
    n = offs.shape[0] - 1
    out = np.empty(n)
    e_idx = np.empty((0, 0), dtype=np.int64)
    e_dist = np.empty((0, 0))
    buf = np.empty(max_tokens)
    for v in range(n):
        s = offs[v]
        e = offs[v + 1]
        out[v] = K.usim_exact(qt, qw, tt, s, e, gamma, metric, buf[: e - s], e_idx, e_dist)
    return out


def scan_scores(dataset: Dataset, Q: MultiVector, sim: SimilarityConfig | None = None) -> np.ndarray:
    """Exact USim(Q, V) for every object V, bitwise equal to ``usim_exact``."""
    sim = sim or SimilarityConfig()
    if Q.dim != dataset.dim:
        raise ValueError(f"dimension mismatch: {Q.dim} != {dataset.dim}")
    return _scan(Q.tokens, query_weights(Q, sim), dataset.token_blocks, dataset.offsets, sim.gamma, sim.metric,
                 dataset.max_tokens)


def linear_scan_topk(dataset: Dataset, Q: MultiVector, k: int,
                     sim: SimilarityConfig | None = None) -> list[tuple[int, float]]:
    """Exact top-k as (id, score), score descending then id ascending; k > n yields n rows."""
    sim = sim or SimilarityConfig()
    if sim.approx:
        raise ValueError("the oracle is always exact; pass a config with approx=False")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = scan_scores(dataset, Q, sim)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def ground_truth(dataset: Dataset, queries, k: int, sim: SimilarityConfig | None = None) -> GroundTruth:
    rows = [linear_scan_topk(dataset, Q, k, sim) for Q in queries]
    kk = min(k, len(dataset))
    ids = np.array([[i for i, _ in r] for r in rows], dtype=np.int64).reshape(-1, kk)
    scores = np.array([[s for _, s in r] for r in rows], dtype=np.float64).reshape(-1, kk)
    return GroundTruth(ids, scores)


def recall(result_ids, truth_ids, k: int | None = None) -> float:
    truth = list(truth_ids)
    k = len(truth) if k is None else k
    if len(truth) != k:
        raise ValueError(f"truth has {len(truth)} ids, expected {k}")
    if k == 0:
        raise ValueError("k must be >= 1")
    return len(set(int(x) for x in result_ids) & set(int(x) for x in truth)) / k


def write_ground_truth(path, gt: GroundTruth) -> None:
    rows = np.empty(gt.ids.shape, dtype=_GT_ROW)
    rows["id"] = gt.ids
    rows["score"] = gt.scores
    with open(path, "wb") as f:
        f.write(_GT_HEADER.pack(GT_MAGIC, GT_VERSION, gt.k, len(gt)))
        f.write(rows.tobytes())


def read_ground_truth(path) -> GroundTruth:
    data = Path(path).read_bytes()
    if len(data) < _GT_HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    magic, version, k, nq = _GT_HEADER.unpack_from(data, 0)
    if magic != GT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != GT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    need = _GT_HEADER.size + nq * k * _GT_ROW.itemsize
    if len(data) < need:
        raise FormatError(f"{path}: truncated body at byte {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise FormatError(f"{path}: trailing data at byte {need}")
    rows = np.frombuffer(data, dtype=_GT_ROW, offset=_GT_HEADER.size).reshape(nq, k)
    return GroundTruth(rows["id"].astype(np.int64), rows["score"].astype(np.float64))
