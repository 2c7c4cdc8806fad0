import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmrecover.neighbors import assignment_sqdist, nearest_columns, pairwise_sqdist

from oracles import dense_nearest


@st.composite
def cloud_pairs(draw, max_k=40, max_n=120, integer=None):
    k = draw(st.integers(1, max_k))
    m = draw(st.integers(1, max_n))
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    if integer if integer is not None else draw(st.booleans()):
        # small integer grids produce many exact ties
        return rng.integers(-2, 3, (k, m)).astype(float), rng.integers(-2, 3, (k, n)).astype(float)
    return rng.standard_normal((k, m)), rng.standard_normal((k, n))


@given(cloud_pairs())
def test_matches_dense_oracle_with_lowest_index_ties(pair):
    X, Y = pair
    ref_idx, ref_d = dense_nearest(X, Y)
    for method in ("tree", "brute", "auto"):
        idx, d = nearest_columns(X, Y, method)
        assert np.array_equal(idx, ref_idx)
        assert np.allclose(d, ref_d, rtol=1e-12, atol=1e-12)


@given(cloud_pairs(max_k=60), st.integers(1, 50))
def test_tree_and_brute_are_bit_identical(pair, block):
    X, Y = pair
    a = nearest_columns(X, Y, "tree")
    b = nearest_columns(X, Y, "brute", block=block)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_exact_duplicates_resolve_to_first():
    Y = np.array([[0.0, 1.0, 0.0, 1.0]])
    idx, d = nearest_columns(np.array([[0.0, 1.0, 0.4]]), Y)
    assert idx.tolist() == [0, 1, 0]
    assert d.tolist() == [0.0, 0.0, pytest.approx(0.16)]


def test_argument_errors():
    with pytest.raises(ValueError):
        nearest_columns(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        nearest_columns(np.zeros((2, 3)), np.zeros((2, 0)))
    with pytest.raises(ValueError):
        nearest_columns(np.zeros((2, 3)), np.zeros((2, 3)), "ball")


@given(cloud_pairs(max_n=40, integer=False))
def test_distance_helpers_agree(pair):
    X, Y = pair
    D = ((X[:, :, None] - Y[:, None, :]) ** 2).sum(axis=0)
    assert np.allclose(pairwise_sqdist(X, Y), D, rtol=1e-12, atol=1e-12)
    a = np.random.default_rng(0).integers(0, Y.shape[1], X.shape[1])
    assert np.allclose(assignment_sqdist(X, Y, a), D[np.arange(X.shape[1]), a], rtol=1e-12, atol=1e-12)
