import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fmrecover.fmap import PERMUTATION, PointMap, fmap_from_pointmap
from fmrecover.shapes import fibonacci_sphere, icosphere, permuted_copy, random_sphere
from fmrecover.spectral import mesh_basis

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ico2():
    return icosphere(2)


@pytest.fixture(scope="session")
def ico3():
    return icosphere(3)


@pytest.fixture(scope="session")
def ico4():
    return icosphere(4)


@pytest.fixture(scope="session")
def fib500():
    return fibonacci_sphere(500)


@pytest.fixture(scope="session")
def rand500():
    return random_sphere(500, 0)


@pytest.fixture(scope="session")
def permuted_ico3(ico3):
    """Icosphere(3) and a relabelled copy with the ground truth, plus k=30 bases and the true C."""
    target, perm = permuted_copy(ico3, 1)
    truth = PointMap(perm, ico3.n, PERMUTATION)
    sb = mesh_basis(ico3, 30)
    tb = mesh_basis(target, 30)
    return ico3, target, truth, fmap_from_pointmap(truth, sb, tb)


@pytest.fixture(scope="session")
def permuted_rand500(rand500):
    target, perm = permuted_copy(rand500, 1)
    truth = PointMap(perm, rand500.n, PERMUTATION)
    sb = mesh_basis(rand500, 30)
    tb = mesh_basis(target, 30)
    return rand500, target, truth, fmap_from_pointmap(truth, sb, tb)


def random_orthogonal(k, rng):
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}
_SESSION_START = time.perf_counter()
SUITE_BUDGET = 20 * 60.0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    elapsed = time.perf_counter() - _SESSION_START
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
    verdict = "PASS" if elapsed <= SUITE_BUDGET else "FAIL"
    terminalreporter.write_line(f"{verdict} suite runtime {elapsed:.1f} s (budget {SUITE_BUDGET:.0f} s)")


def pytest_sessionfinish(session, exitstatus):
    if ACCEPTANCE and time.perf_counter() - _SESSION_START > SUITE_BUDGET and exitstatus == 0:
        session.exitstatus = 1
