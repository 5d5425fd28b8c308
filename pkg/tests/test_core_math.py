import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfpath.core_math import cosine_sim, l2_normalize, psi, similarity_matrix
from cfpath.errors import DimensionMismatch, ZeroVector

import oracles

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(2, 8), elements=finite).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@pytest.mark.parametrize("v, expected", [
    ([3, 4], [0.6, 0.8]),
    ([1, 0, 0], [1, 0, 0]),
    ([2, 2], [0.70710678, 0.70710678]),
])
def test_l2_normalize_examples(v, expected):
    np.testing.assert_allclose(l2_normalize(v), expected, atol=1e-8)


def test_l2_normalize_zero():
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 1e-13])


@pytest.mark.parametrize("a, b, expected", [
    ([1, 0], [0, 1], 0.0),
    ([1, 0], [-1, 0], -1.0),
    ([1, 1], [1, 0], 0.70710678),
])
def test_cosine_examples(a, b, expected):
    assert cosine_sim(a, b) == pytest.approx(expected, abs=1e-8)


def test_psi_examples():
    x = [0.3, -1.2, 2.0]
    assert psi(x, x, 1.0) == pytest.approx(math.e, rel=1e-12)
    assert psi([1, 0], [0, 1], 0.2) == pytest.approx(1.0, abs=1e-12)
    assert psi(x, x, 0.2) == pytest.approx(148.4131591, rel=1e-9)


def test_psi_rejects_bad_tau():
    with pytest.raises(ValueError):
        psi([1, 0], [1, 0], 0.0)


def test_similarity_matrix_examples():
    np.testing.assert_allclose(similarity_matrix(np.eye(3), np.eye(3)), np.eye(3))
    rng = np.random.default_rng(0)
    b = rng.normal(size=(4, 8))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    s = similarity_matrix(b, b)
    brute = np.array([[oracles.cos(b[i], b[j]) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(s, brute, atol=1e-12)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)


def test_similarity_matrix_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


@given(vectors)
def test_normalize_idempotent_and_unit(v):
    n = l2_normalize(v)
    assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(l2_normalize(n), n, atol=1e-7)


@settings(max_examples=50)
@given(st.integers(2, 6).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))),
    st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariant(pair, alpha, beta):
    a, b = pair
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert cosine_sim(alpha * a, beta * b) == pytest.approx(cosine_sim(a, b), abs=1e-7)


def test_psi_monotone():
    # increasing in similarity, decreasing in tau for sim > 0
    a = np.array([1.0, 0.0])
    sims = [np.array([np.cos(t), np.sin(t)]) for t in np.linspace(np.pi, 0, 20)]
    vals = [psi(a, b, 0.3) for b in sims]
    assert all(x < y for x, y in zip(vals, vals[1:]))
    b = np.array([1.0, 0.5])
    taus = [0.05, 0.1, 0.2, 0.5, 1.0]
    vals = [psi(a, b, t) for t in taus]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_similarity_matrix_symmetric():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(30, 7))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    s = similarity_matrix(b, b)
    np.testing.assert_allclose(s, s.T, atol=1e-7)
    assert np.all(np.abs(s) <= 1 + 1e-6)
