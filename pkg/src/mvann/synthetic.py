"""Topic-mixture generator for clustered multi-vector datasets.

Topic centroids are uniform on the unit sphere. Each object mixes one to
``max_topics`` topics with Dirichlet weights; every token picks a topic from
that mixture, adds isotropic Gaussian noise to its centroid and is
L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mvann.core import Dataset


@dataclass(frozen=True)
class GeneratorSpec:
    n: int = 1000
    dim: int = 32
    c_min: int = 8
    c_max: int = 32
    clusters: int = 20
    sigma: float = 0.15
    seed: int = 0
    max_topics: int = 3

    def __post_init__(self):
        if self.n < 1 or self.dim < 1:
            raise ValueError("n and dim must be positive")
        if not 2 <= self.c_min <= self.c_max:
            raise ValueError(f"need 2 <= c_min <= c_max, got c_min={self.c_min}, c_max={self.c_max}")
        if self.clusters < 1:
            raise ValueError("clusters must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_topics < 1:
            raise ValueError("max_topics must be positive")


@dataclass
class SyntheticData:
    dataset: Dataset
    topics: list[np.ndarray]  # per object, the topic ids it mixes
    centroids: np.ndarray  # (clusters, dim) float64


def topic_centroids(spec: GeneratorSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    c = rng.standard_normal((spec.clusters, spec.dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def _objects(spec: GeneratorSpec, centroids: np.ndarray, n: int, rng: np.random.Generator) -> SyntheticData:
    tokens, counts, topics = [], [], []
    max_t = min(spec.max_topics, spec.clusters)
    for _ in range(n):
        c = int(rng.integers(spec.c_min, spec.c_max + 1))
        t = int(rng.integers(1, max_t + 1))
        chosen = np.sort(rng.choice(spec.clusters, size=t, replace=False))
        mix = rng.dirichlet(np.ones(t))
        picks = chosen[rng.choice(t, size=c, p=mix)]
        x = centroids[picks] + spec.sigma * rng.standard_normal((c, spec.dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        tokens.append(x.astype(np.float32))
        counts.append(c)
        topics.append(chosen)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    toks = np.concatenate(tokens)
    ds = Dataset(spec.dim, toks, offsets, np.ones(toks.shape[0], dtype=np.float32), normalized=True)
    return SyntheticData(ds, topics, centroids)


def generate_with_topics(spec: GeneratorSpec) -> SyntheticData:
    centroids = topic_centroids(spec)
    rng = np.random.default_rng([spec.seed, 1])
    return _objects(spec, centroids, spec.n, rng)


def generate_synthetic(spec: GeneratorSpec) -> Dataset:
    return generate_with_topics(spec).dataset


def generate_queries(spec: GeneratorSpec, n_queries: int, seed: int) -> SyntheticData:
    """Queries drawn from the same topic centroids as ``spec`` with an independent seed."""
    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    centroids = topic_centroids(spec)
    rng = np.random.default_rng([seed, 2])
    return _objects(spec, centroids, n_queries, rng)
