import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmrecover.evaluation import (
    DEFAULT_THRESHOLDS,
    SWEEP_THRESHOLD,
    GeodesicCache,
    evaluate_map,
    map_quality_fields,
    rank_sweep,
    run_method,
    write_scalar_field,
    write_sweep,
)
from fmrecover.fmap import PERMUTATION, FunctionalMap, PointMap, fmap_from_pointmap
from fmrecover.shapes import icosphere, permuted_copy, random_sphere
from fmrecover.spectral import mesh_basis

from oracles import floyd_warshall


@pytest.fixture(scope="module")
def sphere100():
    mesh = random_sphere(100, 8)
    return mesh, floyd_warshall(mesh.vertices, mesh.faces.tolist())


def test_default_thresholds_include_sweep_threshold():
    assert np.any(np.isclose(DEFAULT_THRESHOLDS, SWEEP_THRESHOLD, rtol=0, atol=1e-15))
    assert DEFAULT_THRESHOLDS[0] == 0.0 and DEFAULT_THRESHOLDS[-1] == 0.25


def test_identity_map_is_perfect(sphere100):
    mesh, _ = sphere100
    truth = PointMap.identity(100)
    curve = evaluate_map(truth, truth, mesh)
    assert curve.exact_match_pct == 100.0
    assert np.all(curve.fractions == 1.0)
    assert curve.mean_error == 0.0


def test_single_wrong_vertex(sphere100):
    mesh, D = sphere100
    truth = PointMap.identity(100)
    a = np.arange(100)
    a[0] = 57
    curve = evaluate_map(PointMap(a, 100), truth, mesh)
    err = D[0, 57] / math.sqrt(mesh.area)
    assert curve.errors[0] == pytest.approx(err, rel=1e-12)
    assert np.all(curve.errors[1:] == 0)
    assert curve.exact_match_pct == 99.0
    assert curve.fraction_below(err * (1 - 1e-9)) == 0.99
    assert curve.fraction_below(err) == 1.0
    assert curve.mean_error == pytest.approx(err / 100, rel=1e-12)


@given(seed=st.integers(0, 2**31))
def test_errors_match_floyd_warshall(sphere100, seed):
    mesh, D = sphere100
    rng = np.random.default_rng(seed)
    truth = PointMap(rng.permutation(100), 100, PERMUTATION)
    pm = PointMap(rng.integers(0, 100, 100), 100)
    curve = evaluate_map(pm, truth, mesh)
    ref = D[truth.assignment, pm.assignment] / math.sqrt(mesh.area)
    assert np.allclose(curve.errors, ref, rtol=1e-12, atol=1e-15)


@given(seed=st.integers(0, 2**31))
def test_curve_is_monotone_and_symmetric(sphere100, seed):
    mesh, _ = sphere100
    rng = np.random.default_rng(seed)
    a = PointMap(rng.integers(0, 100, 100), 100)
    b = PointMap(rng.integers(0, 100, 100), 100)
    ab = evaluate_map(a, b, mesh)
    ba = evaluate_map(b, a, mesh)
    assert np.all(np.diff(ab.fractions) >= 0)
    assert np.all((ab.fractions >= 0) & (ab.fractions <= 1))
    assert np.allclose(ab.errors, ba.errors, rtol=1e-12, atol=0)
    assert np.array_equal(ab.fractions, ba.fractions)


def test_cache_reuses_rows(sphere100):
    mesh, D = sphere100
    cache = GeodesicCache(mesh)
    rows = cache.rows([3, 3, 9])
    assert np.allclose(rows, D[[3, 3, 9]], rtol=1e-12)
    assert set(cache._rows) == {3, 9}


def test_argument_checks(sphere100):
    mesh, _ = sphere100
    truth = PointMap.identity(100)
    with pytest.raises(ValueError):
        evaluate_map(PointMap.identity(99), truth, mesh)
    with pytest.raises(ValueError):
        evaluate_map(truth, truth, icosphere(1))
    with pytest.raises(ValueError):
        evaluate_map(truth, truth, mesh, [0.1, 0.05])
    b = mesh_basis(mesh, 5)
    with pytest.raises(ValueError):
        run_method("icp", FunctionalMap(np.eye(5), b, b))


def test_curve_csv(tmp_path, sphere100):
    mesh, _ = sphere100
    truth = PointMap.identity(100)
    curve = evaluate_map(truth, truth, mesh, [0.0, 0.02])
    curve.to_csv(tmp_path / "c.csv")
    rows = list(csv.reader((tmp_path / "c.csv").open()))
    assert rows == [["threshold", "fraction"], ["0", "1"], ["0.02", "1"]]


# ---------------------------------------------------------------------------
# rank sweep


@pytest.fixture(scope="module")
def permuted_fib(fib500):
    target, perm = permuted_copy(fib500, 3)
    return fib500, target, PointMap(perm, fib500.n, PERMUTATION)


def test_sweep_on_exact_maps(permuted_fib):
    src, tgt, truth = permuted_fib
    rows = rank_sweep(src, tgt, truth, [9, 16, 25], ["max", "nn", "balanced_nn"])
    assert [(r["k"], r["method"]) for r in rows] == [
        (k, m) for k in (9, 16, 25) for m in ("max", "nn", "balanced_nn")
    ]
    for r in rows:
        assert r["exact_pct"] >= 99.0
        assert r["pct_below_002"] >= r["exact_pct"]


def test_sweep_with_noise_averages_trials(permuted_fib):
    src, tgt, truth = permuted_fib
    bases = (mesh_basis(src, 20), mesh_basis(tgt, 20))
    one = rank_sweep(src, tgt, truth, [20], ["nn"], noise=0.3, seed=0, trials=1, bases=bases)
    two = rank_sweep(src, tgt, truth, [20], ["nn"], noise=0.3, seed=1, trials=1, bases=bases)
    both = rank_sweep(src, tgt, truth, [20], ["nn"], noise=0.3, seed=0, trials=2, bases=bases)
    assert both[0]["exact_pct"] == pytest.approx((one[0]["exact_pct"] + two[0]["exact_pct"]) / 2, rel=1e-12)


def test_sweep_argument_checks(permuted_fib):
    src, tgt, truth = permuted_fib
    with pytest.raises(ValueError):
        rank_sweep(src, tgt, truth, [20, 10])
    with pytest.raises(ValueError):
        rank_sweep(src, tgt, truth, [10], ["icp"])
    with pytest.raises(ValueError):
        rank_sweep(src, tgt, PointMap(np.zeros(500, dtype=np.int64), 500), [10])


def test_sweep_tables(tmp_path):
    rows = [
        {"k": k, "method": m, "exact_pct": float(k), "pct_below_002": float(k) + 0.5}
        for k in (10, 20)
        for m in ("nn", "max")
    ]
    write_sweep(rows, tmp_path / "long.csv", tmp_path / "wide.csv")
    long = list(csv.reader((tmp_path / "long.csv").open()))
    assert long[0] == ["k", "method", "exact_pct", "pct_below_002"]
    assert long[1] == ["10", "nn", "10", "10.5"]
    wide = list(csv.reader((tmp_path / "wide.csv").open()))
    assert wide[0] == ["k", "nn_exact", "max_exact", "nn_below_002", "max_below_002"]
    assert wide[2] == ["20", "20", "20", "20.5", "20.5"]


# ---------------------------------------------------------------------------
# map-quality fields


def test_identity_map_fields():
    b = mesh_basis(icosphere(2), 10)
    f = map_quality_fields(FunctionalMap(np.eye(10), b, b))
    assert np.allclose(f["singular_values"], 1.0)
    assert f["source_fields"].shape == (162, 5)
    assert np.allclose(f["source_fields"], f["target_fields"], atol=1e-12)


def test_fields_are_invariant_to_scaling(permuted_rand500):
    C = permuted_rand500[3].truncate(12)
    a = map_quality_fields(C, 4)
    b = map_quality_fields(C.with_matrix(2 * C.matrix), 4)
    assert np.allclose(b["singular_values"], 2 * a["singular_values"], rtol=1e-12)
    assert np.allclose(a["source_fields"], b["source_fields"], atol=1e-10)
    assert np.allclose(a["target_fields"], b["target_fields"], atol=1e-10)


def test_fields_sign_convention(permuted_rand500):
    f = map_quality_fields(permuted_rand500[3], 6)
    C = permuted_rand500[3]
    V = np.linalg.lstsq(C.source_basis.functions, f["source_fields"], rcond=None)[0]
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(6)] > 0)
    with pytest.raises(ValueError):
        map_quality_fields(C, 31)


def test_scalar_field_file(tmp_path):
    write_scalar_field(np.array([0.1, 2.0]), tmp_path / "f.txt")
    assert np.array_equal(np.loadtxt(tmp_path / "f.txt"), [0.1, 2.0])
