import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmrecover.fmap import exact_match_rate, perturb_fmap
from fmrecover.probabilistic import (
    DEFAULT_BETA,
    DEFAULT_ITERATIONS,
    DEFAULT_LAMBDA,
    SIGMA_FLOOR,
    AlignmentError,
    em_step,
    init_alignment,
    posterior_map,
    recover_probabilistic,
    run_alignment,
)
from fmrecover.recovery import EmbeddedCloudPair, embed, recover_nn

from oracles import cpd_step, gaussian_responsibilities


def noisy_pair(seed, k, n, m=None, noise=0.2):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((k, n))
    m = n if m is None else m
    Y = X[:, rng.integers(0, n, m)] + noise * rng.standard_normal((k, m)) if m != n else X + noise * rng.standard_normal((k, n))
    return EmbeddedCloudPair(X, Y)


def diameter(X):
    return np.sqrt(((X[:, :, None] - X[:, None, :]) ** 2).sum(axis=0).max())


def test_default_parameters():
    assert DEFAULT_LAMBDA == 3.0
    assert DEFAULT_ITERATIONS == 5
    assert DEFAULT_BETA == 2.0


# ---------------------------------------------------------------------------
# initialisation


def test_repeated_point_cloud_is_rejected():
    X = np.ones((3, 10))
    with pytest.raises(AlignmentError, match="diameter"):
        init_alignment(EmbeddedCloudPair(X, np.random.default_rng(0).standard_normal((3, 10))))
    with pytest.raises(AlignmentError, match="diameter"):
        init_alignment(EmbeddedCloudPair(np.random.default_rng(0).standard_normal((3, 10)), X))


def test_identical_clouds_variance():
    Y = np.random.default_rng(3).standard_normal((4, 25))
    state = init_alignment(EmbeddedCloudPair(Y, Y.copy()))
    total = sum(np.sum((Y[:, j] - Y[:, i]) ** 2) for i in range(25) for j in range(25))
    assert state.sigma2 == pytest.approx(total / (4 * 25 * 25), rel=1e-12)
    assert state.sigma2 > 0
    assert np.array_equal(state.displacement, np.zeros((4, 25)))
    assert np.array_equal(state.centroids, Y)


def test_hand_computed_variance():
    X = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    Y = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
    # squared distances per centroid: 0+4+4, 1+1+5, 1+5+1 = 22 over k*n*m = 18
    assert init_alignment(EmbeddedCloudPair(X, Y)).sigma2 == pytest.approx(11 / 9, abs=1e-12)


def test_kernel_uses_scaled_width():
    clouds = noisy_pair(1, 3, 30)
    state = init_alignment(clouds, kernel_width=1.5)
    X = clouds.source_points
    s = np.sqrt(np.mean(np.sum((X - X.mean(axis=1, keepdims=True)) ** 2, axis=0)))
    beta = 1.5 * s
    D = ((X[:, :, None] - X[:, None, :]) ** 2).sum(axis=0)
    assert state.kernel_width == pytest.approx(beta, rel=1e-12)
    assert np.allclose(state.kernel, np.exp(-D / (2 * beta**2)), rtol=1e-12)


def test_argument_checks():
    clouds = noisy_pair(0, 2, 10)
    with pytest.raises(ValueError):
        init_alignment(clouds, lam=0.0)
    with pytest.raises(ValueError):
        init_alignment(clouds, kernel_width=-1.0)
    with pytest.raises(ValueError):
        run_alignment(clouds, iterations=0)


# ---------------------------------------------------------------------------
# EM update


@given(seed=st.integers(0, 2**31), k=st.integers(1, 5), n=st.integers(2, 25), m=st.integers(2, 25))
def test_em_step_matches_textbook_update(seed, k, n, m):
    clouds = noisy_pair(seed, k, n, m, noise=0.5)
    state = init_alignment(clouds)
    for _ in range(2):
        W_ref, s2_ref = cpd_step(
            state.initial, clouds.target_points, state.weights, state.kernel, state.sigma2, state.reg_weight
        )
        nxt = em_step(state, clouds.target_points)
        scale = max(np.abs(W_ref).max(), 1e-12)
        assert np.max(np.abs(nxt.weights - W_ref)) <= 1e-7 * scale
        if not nxt.converged:
            assert nxt.sigma2 == pytest.approx(s2_ref, rel=1e-8)
        state = nxt


def test_single_point_moves_onto_data():
    clouds = EmbeddedCloudPair(np.array([[0.0]]), np.array([[1.0]]))
    state = em_step(init_alignment(clouds, lam=1e-12), clouds.target_points)
    # the residual pull of the regulariser is of order lambda
    assert state.centroids[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_aligned_clouds_stay_put_at_small_variance():
    Y = np.random.default_rng(5).standard_normal((3, 60))
    clouds = EmbeddedCloudPair(Y, Y.copy())
    start = init_alignment(clouds)
    d = ((Y[:, :, None] - Y[:, None, :]) ** 2).sum(axis=0)
    spacing = d[~np.eye(60, dtype=bool)].min()
    state = em_step(replace(start, sigma2=0.01 * spacing), Y)
    P = gaussian_responsibilities(Y, Y, 0.01 * spacing)
    assert np.all(np.argmax(P, axis=0) == np.arange(60))
    assert np.linalg.norm(state.displacement) <= 1e-6 * diameter(Y)
    assert state.sigma2 < 0.01 * spacing


def test_variance_shrinks_from_moment_matched_start():
    Y = np.random.default_rng(5).standard_normal((3, 60))
    clouds = EmbeddedCloudPair(Y, Y.copy())
    start = init_alignment(clouds)
    assert em_step(start, Y).sigma2 < start.sigma2


def test_variance_floor_flags_convergence():
    Y = np.random.default_rng(6).standard_normal((2, 20))
    clouds = EmbeddedCloudPair(Y, Y.copy())
    state = replace(init_alignment(clouds), sigma2=1e-30)
    nxt = em_step(state, Y)
    assert nxt.converged
    assert nxt.sigma2 == SIGMA_FLOOR * state.sigma2_init


def test_streamed_estep_matches_dense():
    clouds = noisy_pair(2, 4, 50, 70)
    state = init_alignment(clouds)
    a = em_step(state, clouds.target_points)
    b = em_step(state, clouds.target_points, block=7)
    assert np.allclose(a.weights, b.weights, rtol=1e-10, atol=1e-14)
    assert a.sigma2 == pytest.approx(b.sigma2, rel=1e-12)
    assert state.objective(clouds.target_points) == pytest.approx(state.objective(clouds.target_points, 9), rel=1e-12)


@given(seed=st.integers(0, 2**31), k=st.integers(1, 8), n=st.integers(2, 200), m=st.integers(2, 200))
def test_objective_trace_never_increases(seed, k, n, m):
    clouds = noisy_pair(seed, k, n, m, noise=0.3)
    state, trace = run_alignment(clouds, iterations=10)
    obj = trace.objective
    for a, b in zip(obj, obj[1:]):
        assert b <= a + 1e-9 * abs(a)
    assert all(s > 0 for s in trace.sigma2)


@given(seed=st.integers(0, 2**31), k=st.integers(1, 8), n=st.integers(2, 100), m=st.integers(2, 100))
def test_responsibilities_are_distributions(seed, k, n, m):
    clouds = noisy_pair(seed, k, n, m)
    state, _ = run_alignment(clouds, iterations=2)
    cols = np.random.default_rng(seed).choice(m, size=min(m, 10), replace=False)
    P = state.responsibilities(clouds.target_points, cols)
    assert P.shape == (n, len(cols))
    assert np.all(P >= 0)
    assert np.allclose(P.sum(axis=0), 1.0, rtol=0, atol=1e-9)


def test_single_iteration_equals_one_step():
    clouds = noisy_pair(4, 3, 40)
    state, trace = run_alignment(clouds, iterations=1)
    ref = em_step(init_alignment(clouds), clouds.target_points)
    assert np.array_equal(state.weights, ref.weights)
    assert state.sigma2 == ref.sigma2
    assert len(trace.objective) == 2


def test_huge_regularisation_pins_displacement():
    clouds = noisy_pair(8, 4, 80, noise=0.3)
    state, _ = run_alignment(clouds, lam=1e12)
    assert np.linalg.norm(state.displacement) <= 1e-3 * diameter(clouds.source_points)
    assert np.array_equal(posterior_map(state, clouds).map.assignment, recover_nn(clouds).map.assignment)


@given(seed=st.integers(0, 2**31), shift=st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_translation_equivariance(seed, shift):
    clouds = noisy_pair(seed, 3, 60, noise=0.3)
    t = np.array(shift)[:, None]
    moved = EmbeddedCloudPair(clouds.source_points + t, clouds.target_points + t)
    a, ta = recover_probabilistic(clouds)
    b, tb = recover_probabilistic(moved)
    assert np.array_equal(a.map.assignment, b.map.assignment)
    assert np.allclose(ta.objective, tb.objective, rtol=1e-9)


# ---------------------------------------------------------------------------
# posterior map


@given(seed=st.integers(0, 2**31), k=st.integers(1, 6), n=st.integers(2, 200))
def test_posterior_argmax_is_nearest_moved_centroid(seed, k, n):
    clouds = noisy_pair(seed, k, n, noise=0.3)
    state, _ = run_alignment(clouds, iterations=3)
    T, Y = state.centroids, clouds.target_points
    # component density of every data point under each moved centroid
    D = ((T[:, :, None] - Y[:, None, :]) ** 2).sum(axis=0)
    logdens = -D / (2 * state.sigma2) - 0.5 * k * np.log(2 * np.pi * state.sigma2)
    ref = np.argmax(logdens, axis=1)
    assert np.array_equal(posterior_map(state, clouds).map.assignment, ref)


def test_aligned_clouds_give_identity_map():
    Y = np.random.default_rng(9).standard_normal((5, 50))
    res, _ = recover_probabilistic(EmbeddedCloudPair(Y, Y.copy()))
    assert np.array_equal(res.map.assignment, np.arange(50))


def test_beats_nn_on_noisy_icosphere_pair(permuted_ico3):
    _, _, truth, C = permuted_ico3
    nn, prob = [], []
    for s in range(10):
        clouds = embed(perturb_fmap(C, 0.3, s))
        nn.append(exact_match_rate(recover_nn(clouds).map, truth))
        prob.append(exact_match_rate(recover_probabilistic(clouds)[0].map, truth))
    assert np.mean(prob) > np.mean(nn)


def test_trace_csv(tmp_path):
    _, trace = run_alignment(noisy_pair(1, 2, 20))
    trace.to_csv(tmp_path / "em.csv")
    rows = list(csv.reader((tmp_path / "em.csv").open()))
    assert rows[0] == ["iteration", "objective", "sigma2", "mean_displacement"]
    assert len(rows) == 1 + len(trace.objective)
    assert float(rows[1][1]) == trace.objective[0]
