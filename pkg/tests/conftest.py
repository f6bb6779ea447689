from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvann import GeneratorSpec, IndexParams, MultiVector, build_bundle, generate_queries, generate_synthetic
from mvann.core import Dataset

warnings.filterwarnings("ignore", module="numba")

settings.register_profile("mvann", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("mvann")

R2 = 1 / math.sqrt(2)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def ex21():
    """Three query tokens with weights 1, 0, 1 against a three-token object."""
    Q = MultiVector(0, [[1, 0], [0, 1], [R2, R2]], [1, 0, 1])
    V = MultiVector(1, [[0.8, 0.6], [0.6, 0.8], [R2, R2]])
    return Q, V


@pytest.fixture
def ex22():
    """Three two-token objects in three dimensions and a two-token query."""
    objs = [
        [[math.sqrt(3) / 2, 0.5, 0], [0, 0.8, 0.6]],
        [[R2, R2, 0], [0, 0.6, 0.8]],
        [[0.6, 0.8, 0], [0, 1, 0]],
    ]
    ds = Dataset.from_multivectors([MultiVector(i, o) for i, o in enumerate(objs)])
    Q = MultiVector(0, [[1, 0, 0], [0, R2, R2]])
    return ds, Q


def random_unit(rng: np.random.Generator, c: int, d: int) -> np.ndarray:
    x = rng.standard_normal((c, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(n=300, dim=16, c_min=4, c_max=24, clusters=8, sigma=0.2, seed=11)


@pytest.fixture(scope="session")
def small_bundle(small_spec):
    ds = generate_synthetic(small_spec)
    return build_bundle(ds, IndexParams(M=8, ef_construction=32, seed=3))


@pytest.fixture(scope="session")
def small_queries(small_spec):
    return list(generate_queries(small_spec, 20, 99).dataset)


@pytest.fixture(scope="session")
def spec_2k():
    return GeneratorSpec(n=2000, dim=32, c_min=8, c_max=32, clusters=20, sigma=0.15, seed=21)


@pytest.fixture(scope="session")
def bundle_2k(spec_2k):
    return build_bundle(generate_synthetic(spec_2k), IndexParams(M=16, ef_construction=100, seed=21))


@pytest.fixture(scope="session")
def queries_2k(spec_2k):
    return list(generate_queries(spec_2k, 50, 77).dataset)


@pytest.fixture(scope="session")
def spec_1k():
    return GeneratorSpec(n=1000, dim=32, c_min=8, c_max=32, clusters=20, sigma=0.15, seed=31)


@pytest.fixture(scope="session")
def bundle_1k(spec_1k):
    return build_bundle(generate_synthetic(spec_1k), IndexParams(M=16, ef_construction=100, seed=31))
