from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_unit
from mvann.core import (
    Dataset,
    Distance,
    MultiVector,
    SimilarityConfig,
    dis,
    gamma_nn_exact,
    l2_normalize,
    metric_preset,
    usim_exact,
)

seeds = st.integers(0, 2**32 - 1)


# -- dis ------------------------------------------------------------------------

def test_dis_inner_product_worked_value():
    assert dis((1, 0), (0.8, 0.6)) == pytest.approx(0.8, abs=1e-7)


def test_dis_self_similarity_and_orthogonality():
    assert dis((1, 0), (1, 0)) == 1.0
    assert dis((0, 1, 0), (1, 0, 0)) == 0.0


def test_dis_negative_euclidean_is_larger_when_closer():
    cfg = SimilarityConfig(distance=Distance.NEGATIVE_EUCLIDEAN)
    assert dis((0, 0), (3, 4), cfg) == -5.0
    assert dis((0, 0), (0, 1), cfg) > dis((0, 0), (3, 4), cfg)


def test_dis_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        dis((1, 0), (1, 0, 0))


# -- gamma_nn_exact --------------------------------------------------------------

def test_gamma_nn_worked_value(ex22):
    ds, _ = ex22
    (idx, d), = gamma_nn_exact((1, 0, 0), ds[0], 1)
    assert idx == 0
    assert d == pytest.approx(math.sqrt(3) / 2, abs=1e-6)


def test_gamma_nn_full_set_is_sorted(ex22):
    ds, _ = ex22
    out = gamma_nn_exact((0, 0.6, 0.8), ds[1], 2)
    assert [i for i, _ in out] == [1, 0]
    assert out[0][1] >= out[1][1]


@given(seed=seeds, gamma=st.integers(1, 12), c=st.integers(1, 64))
def test_gamma_nn_matches_exhaustive_sort(seed, gamma, c):
    rng = np.random.default_rng(seed)
    V = random_unit(rng, c, 8)
    q = random_unit(rng, 1, 8)[0]
    got = gamma_nn_exact(q, V, gamma)
    want = oracles.gamma_nn(q, V, gamma)
    assert [i for i, _ in got] == [i for i, _ in want]
    assert np.allclose([d for _, d in got], [d for _, d in want], atol=1e-12)


def test_gamma_nn_ties_prefer_smaller_index():
    V = np.array([[0, 1], [1, 0], [1, 0], [0.6, 0.8]], dtype=np.float32)
    assert [i for i, _ in gamma_nn_exact((1, 0), V, 3)] == [1, 2, 3]


def test_gamma_nn_rejects_bad_gamma_and_empty_set():
    with pytest.raises(ValueError):
        gamma_nn_exact((1, 0), np.ones((2, 2), dtype=np.float32), 0)
    with pytest.raises(ValueError):
        gamma_nn_exact((1, 0), np.empty((0, 2), dtype=np.float32), 1)


# -- usim_exact --------------------------------------------------------------------

def test_usim_weighted_worked_value(ex21):
    Q, V = ex21
    score, _ = usim_exact(Q, V, SimilarityConfig(use_weights=True))
    assert score == pytest.approx(1.8, abs=1e-6)


def test_usim_three_object_worked_values(ex22):
    ds, Q = ex22
    scores = [usim_exact(Q, V)[0] for V in ds]
    assert scores == pytest.approx([1.856, 1.697, 1.307], abs=1e-3)


def test_usim_self_similarity_is_token_count():
    # signed basis vectors are exactly unit length in float32
    Q = MultiVector(0, np.eye(6, dtype=np.float32)[[0, 2, 3, 5]] * np.array([[1], [-1], [1], [-1]], dtype=np.float32))
    assert usim_exact(Q, Q)[0] == float(len(Q))


@given(seed=seeds, c=st.integers(1, 40))
def test_usim_self_similarity_random_unit(seed, c):
    Q = MultiVector(0, random_unit(np.random.default_rng(seed), c, 16))
    assert usim_exact(Q, Q)[0] == pytest.approx(c, abs=1e-5)


def test_usim_divides_by_available_neighbours_when_gamma_exceeds_size():
    Q = MultiVector(0, [[1, 0]])
    V = MultiVector(1, [[1, 0], [0, 1]])
    assert usim_exact(Q, V, SimilarityConfig(gamma=5))[0] == pytest.approx(0.5)


def test_usim_records_matches(ex21):
    Q, V = ex21
    _, m = usim_exact(Q, V)
    assert m.index.shape == (3, 1)
    assert m.pairs(0)[0][0] == 0 and m.pairs(1)[0][0] == 1 and m.pairs(2)[0][0] == 2


@given(seed=seeds, nq=st.integers(1, 24), c=st.integers(1, 48), gamma=st.integers(1, 6),
       weighted=st.booleans(), l2=st.booleans())
def test_usim_matches_numpy_oracle(seed, nq, c, gamma, weighted, l2):
    rng = np.random.default_rng(seed)
    w = rng.random(nq).astype(np.float32) if weighted else None
    Q = MultiVector(0, random_unit(rng, nq, 12), w)
    V = MultiVector(1, random_unit(rng, c, 12))
    cfg = SimilarityConfig(gamma=gamma, use_weights=weighted,
                           distance=Distance.NEGATIVE_EUCLIDEAN if l2 else Distance.INNER_PRODUCT)
    want = oracles.usim(Q.tokens, V.tokens, gamma, Q.weights if weighted else None, "l2" if l2 else "ip")
    assert usim_exact(Q, V, cfg)[0] == pytest.approx(want, abs=1e-9)


@given(seed=seeds, nq=st.integers(1, 24), c=st.integers(1, 48))
def test_usim_range_on_normalized_data(seed, nq, c):
    rng = np.random.default_rng(seed)
    w = rng.random(nq).astype(np.float32)
    Q = MultiVector(0, random_unit(rng, nq, 8), w)
    V = MultiVector(1, random_unit(rng, c, 8))
    bound = nq * float(w.max()) + 1e-6
    s = usim_exact(Q, V, SimilarityConfig(use_weights=True))[0]
    assert -bound <= s <= bound
    s1 = usim_exact(Q, V)[0] / nq
    assert -1 - 1e-6 <= s1 <= 1 + 1e-6


@given(seed=seeds, nq=st.integers(1, 20), c=st.integers(1, 30))
def test_usim_permutation_invariance(seed, nq, c):
    rng = np.random.default_rng(seed)
    Q = MultiVector(0, random_unit(rng, nq, 8))
    V = MultiVector(1, random_unit(rng, c, 8))
    base = usim_exact(Q, V)[0]
    Qp = MultiVector(0, Q.tokens[rng.permutation(nq)])
    Vp = MultiVector(1, V.tokens[rng.permutation(c)])
    assert usim_exact(Qp, V)[0] == pytest.approx(base, abs=1e-12)
    assert usim_exact(Q, Vp)[0] == pytest.approx(base, abs=1e-12)


@given(seed=seeds, nq=st.integers(1, 20), c=st.integers(1, 30))
def test_usim_monotone_when_adding_a_token(seed, nq, c):
    rng = np.random.default_rng(seed)
    Q = MultiVector(0, random_unit(rng, nq, 8))
    V = random_unit(rng, c + 1, 8)
    assert usim_exact(Q, MultiVector(1, V))[0] >= usim_exact(Q, MultiVector(1, V[:c]))[0]


def test_usim_is_deterministic_bitwise():
    rng = np.random.default_rng(5)
    Q = MultiVector(0, random_unit(rng, 17, 32))
    V = MultiVector(1, random_unit(rng, 29, 32))
    assert usim_exact(Q, V)[0] == usim_exact(Q, V)[0]


def test_usim_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        usim_exact(MultiVector(0, [[1, 0]]), MultiVector(1, [[1, 0, 0]]))


# -- presets --------------------------------------------------------------------------

def test_maxsim_preset_reproduces_worked_scores(ex22):
    ds, Q = ex22
    cfg = metric_preset("maxsim")
    assert (cfg.gamma, cfg.use_weights) == (1, False)
    assert [usim_exact(Q, V, cfg)[0] for V in ds] == pytest.approx([1.856, 1.697, 1.307], abs=1e-3)


def test_maxsim_ignores_weights(ex21):
    Q, V = ex21
    assert usim_exact(Q, V, metric_preset("maxsim"))[0] == pytest.approx(0.8 + 0.8 + 1.0, abs=1e-6)


@given(seed=seeds, nq=st.integers(1, 20), c=st.integers(1, 30))
def test_weighted_chamfer_with_unit_weights_equals_maxsim(seed, nq, c):
    rng = np.random.default_rng(seed)
    Q = MultiVector(0, random_unit(rng, nq, 8))
    V = MultiVector(1, random_unit(rng, c, 8))
    assert usim_exact(Q, V, metric_preset("weighted-chamfer"))[0] == usim_exact(Q, V, metric_preset("maxsim"))[0]


def test_aggregate_gnn_hand_expanded():
    Q = MultiVector(0, [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    V = MultiVector(1, [[0.5, 0.5, 0.5], [1, 0, 0], [0, 0.25, 0.75]])
    # distance table rows: (0.5, 1, 0), (0.5, 0, 0.25), (0.5, 0, 0.75)
    want = (1 + 0.5) / 2 + (0.5 + 0.25) / 2 + (0.75 + 0.5) / 2
    assert usim_exact(Q, V, metric_preset("aggregate-gnn", gamma=2))[0] == pytest.approx(want, abs=1e-7)


def test_aggregate_gnn_requires_gamma_above_one():
    with pytest.raises(ValueError):
        metric_preset("aggregate-gnn", gamma=1)
    with pytest.raises(ValueError):
        metric_preset("aggregate-gnn")
    with pytest.raises(ValueError):
        metric_preset("no-such-metric")


def test_similarity_config_rejects_gamma_zero():
    with pytest.raises(ValueError):
        SimilarityConfig(gamma=0)


# -- types --------------------------------------------------------------------------------

def test_multivector_validation():
    with pytest.raises(ValueError):
        MultiVector(0, np.empty((0, 3)))
    with pytest.raises(ValueError):
        MultiVector(0, [[np.nan, 0]])
    with pytest.raises(ValueError):
        MultiVector(0, [[1, 0], [0, 1]], [0.5])
    with pytest.raises(ValueError):
        MultiVector(0, [[1, 0]], [1.5])
    mv = MultiVector(3, [[1, 0]])
    assert len(mv) == 1 and mv.weights.tolist() == [1.0]


def test_dataset_invariants():
    with pytest.raises(ValueError, match="dense"):
        Dataset.from_multivectors([MultiVector(1, [[1, 0]])])
    with pytest.raises(ValueError, match="dimension"):
        Dataset.from_multivectors([MultiVector(0, [[1, 0]]), MultiVector(1, [[1, 0, 0]])])
    ds = Dataset.from_multivectors([MultiVector(0, [[1, 0]]), MultiVector(1, [[0, 1], [1, 0]])])
    assert ds.normalized and len(ds) == 2 and ds.n_tokens == 3
    assert ds.token_ref(2) == (1, 1)
    with pytest.raises(ValueError, match="normalized"):
        Dataset(2, np.array([[2, 0]], dtype=np.float32), np.array([0, 1]), np.ones(1, dtype=np.float32),
                normalized=True)


def test_l2_normalize():
    x = l2_normalize(np.array([[3, 4], [0, 0]]))
    assert np.allclose(x[0], [0.6, 0.8]) and np.all(x[1] == 0)
