"""Recall/latency sweeps over efSearch."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from mvann.core import MultiVector
from mvann.io import IndexBundle
from mvann.oracle import GroundTruth, recall
from mvann.search import SearchParams, knn_search

CSV_COLUMNS = ["efS", "k", "recall", "lat_mean_ms", "lat_p50_ms", "lat_p95_ms", "n_queries"]
WARMUP_QUERIES = 5


@dataclass
class BenchRecord:
    efS: int
    k: int
    recall: float
    lat_mean_ms: float
    lat_p50_ms: float
    lat_p95_ms: float
    n_queries: int

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError("recall must lie in [0, 1]")
        if min(self.lat_mean_ms, self.lat_p50_ms, self.lat_p95_ms) < 0:
            raise ValueError("latencies must be non-negative")

    def row(self) -> list:
        return [self.efS, self.k, f"{self.recall:.6f}", f"{self.lat_mean_ms:.4f}",
                f"{self.lat_p50_ms:.4f}", f"{self.lat_p95_ms:.4f}", self.n_queries]


def timed_search(bundle: IndexBundle, queries: Sequence[MultiVector], params: SearchParams):
    """Results and per-query wall times (ms) measured around the search call alone."""
    results, lat = [], []
    for Q in queries:
        t0 = time.perf_counter()
        res = knn_search(bundle.index, bundle.ant, Q, params)
        lat.append((time.perf_counter() - t0) * 1e3)
        results.append(res)
    return results, np.array(lat)


def run_bench(bundle: IndexBundle, queries: Sequence[MultiVector], gt: GroundTruth, k: int,
              ef_sweep: Sequence[int], base: SearchParams | None = None) -> list[BenchRecord]:
    if len(queries) != len(gt):
        raise ValueError(f"{len(queries)} queries but {len(gt)} ground-truth rows")
    if k > gt.k:
        raise ValueError(f"ground truth holds only {gt.k} neighbours per query, k={k} requested")
    base = base or SearchParams(k=k, sim=bundle.index.params.sim)
    records = []
    for ef in ef_sweep:
        params = replace(base, k=k, ef_search=int(ef))
        timed_search(bundle, queries[:WARMUP_QUERIES], params)
        results, lat = timed_search(bundle, queries, params)
        rec = float(np.mean([recall(r.ids, gt.ids[i, :k], k) for i, r in enumerate(results)]))
        records.append(BenchRecord(int(ef), k, rec, float(lat.mean()), float(np.percentile(lat, 50)),
                                   float(np.percentile(lat, 95)), len(queries)))
    return records


def write_csv(path_or_file, records: Sequence[BenchRecord]) -> None:
    def emit(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row())

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as f:
            emit(f)
