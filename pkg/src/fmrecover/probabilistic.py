"""Probabilistic map recovery by coherent non-rigid alignment of delta images.

The mapped source deltas are the centroids of an isotropic Gaussian mixture
with uniform weights; the target deltas are the data. Centroids move by a
displacement field ``V = G W`` with ``G`` a Gaussian kernel over the initial
centroids, and EM minimises

    -log-likelihood(V, sigma2) + (lambda / 2) * tr(W^T G W) / s^2

where ``s`` is the RMS radius of the source cloud. Dividing by ``s^2`` makes
``lambda`` (like the kernel width, given in multiples of ``s``) independent
of the overall scale of the embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .fmap import LEFT_STOCHASTIC, PointMap
from .neighbors import nearest_columns
from .recovery import EmbeddedCloudPair, RecoveryResult, fidelity

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 3.0
DEFAULT_BETA = 2.0
DEFAULT_ITERATIONS = 5
SIGMA_FLOOR = 1e-12
DENSE_LIMIT = 3000
STOP_TOL = 1e-9


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GmmAlignmentState:
    """Current EM state. Point sets are (k, n) with points as columns."""

    initial: np.ndarray
    weights: np.ndarray  # W, (n, k); displacement = (G @ W).T
    kernel: np.ndarray  # G, (n, n)
    sigma2: float
    sigma2_init: float
    kernel_width: float
    lam: float
    scale: float
    converged: bool = False
    iteration: int = 0

    @property
    def displacement(self) -> np.ndarray:
        return (self.kernel @ self.weights).T

    @property
    def centroids(self) -> np.ndarray:
        return self.initial + self.displacement

    @property
    def reg_weight(self) -> float:
        """Effective regulariser weight on raw (unnormalised) coordinates."""
        return self.lam / self.scale**2

    def regularizer(self) -> float:
        W = self.weights
        return 0.5 * self.reg_weight * float(np.einsum("ik,ik->", W, self.kernel @ W))

    def log_responsibilities(self, data: np.ndarray, columns=None) -> np.ndarray:
        """``log p(centroid i | data point j)`` for the selected data columns, shape (n, m)."""
        Y = np.asarray(data, dtype=np.float64)
        if columns is not None:
            Y = Y[:, columns]
        T = self.centroids.T
        D = _sqdist(T, Y.T)
        a = -D / (2.0 * self.sigma2)
        return a - logsumexp(a, axis=0, keepdims=True)

    def responsibilities(self, data: np.ndarray, columns=None) -> np.ndarray:
        return np.exp(self.log_responsibilities(data, columns))

    def negative_log_likelihood(self, data: np.ndarray, block: int | None = None) -> float:
        return _estep(self, np.asarray(data, dtype=np.float64).T, block)[3]

    def objective(self, data: np.ndarray, block: int | None = None) -> float:
        return self.negative_log_likelihood(data, block) + self.regularizer()


@dataclass
class EmTrace:
    objective: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    mean_displacement: list = field(default_factory=list)

    def record(self, state: GmmAlignmentState, objective: float):
        self.objective.append(objective)
        self.sigma2.append(state.sigma2)
        self.mean_displacement.append(float(np.linalg.norm(state.displacement, axis=0).mean()))

    def to_csv(self, path) -> None:
        rows = ["iteration,objective,sigma2,mean_displacement"]
        for i, (o, s, m) in enumerate(zip(self.objective, self.sigma2, self.mean_displacement)):
            rows.append(f"{i},{o:.17g},{s:.17g},{m:.17g}")
        Path(path).write_text("\n".join(rows) + "\n")


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared distances between rows of A (n, k) and rows of B (m, k)."""
    D = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(D, 0.0)


def _block_size(n: int, m: int, block: int | None) -> int:
    if block is not None:
        return block
    if n <= DENSE_LIMIT:
        return m
    return max(1, (4_000_000 // n))


def _estep(state: GmmAlignmentState, Y: np.ndarray, block: int | None = None):
    """Stream over data points; returns (P @ Y, P @ 1, sum of P, negative log-likelihood).

    ``Y`` is (m, k) here. The responsibility matrix is only held one block of
    data points at a time.
    """
    T = state.centroids.T
    n, k = T.shape
    m = len(Y)
    bs = _block_size(n, m, block)
    PY = np.zeros((n, k))
    P1 = np.zeros(n)
    nll = 0.0
    log_norm = np.log(n) + 0.5 * k * np.log(2.0 * np.pi * state.sigma2)
    for s in range(0, m, bs):
        y = Y[s : s + bs]
        a = -_sqdist(T, y) / (2.0 * state.sigma2)
        lse = logsumexp(a, axis=0)
        P = np.exp(a - lse)
        PY += P @ y
        P1 += P.sum(axis=1)
        nll += float(np.sum(log_norm - lse))
    return PY, P1, float(m), nll


def _rms_radius(X: np.ndarray) -> float:
    c = X.mean(axis=1, keepdims=True)
    return float(np.sqrt(np.mean(np.sum((X - c) ** 2, axis=0))))


def init_alignment(
    clouds: EmbeddedCloudPair, lam: float = DEFAULT_LAMBDA, kernel_width: float = DEFAULT_BETA
) -> GmmAlignmentState:
    """Zero displacement, moment-matched variance and the Gaussian smoothing kernel.

    ``kernel_width`` is in multiples of the source cloud's RMS radius.
    """
    if lam <= 0 or kernel_width <= 0:
        raise ValueError("lambda and kernel width must be positive")
    X = clouds.source_points
    Y = clouds.target_points
    k, n = X.shape
    m = Y.shape[1]
    scale = _rms_radius(X)
    if scale == 0.0:
        if n > 1:
            raise AlignmentError("source cloud has zero diameter (all points coincide)")
        scale = 1.0  # a lone centroid has no intrinsic scale
    if m > 1 and _rms_radius(Y) == 0.0:
        raise AlignmentError("target cloud has zero diameter (all points coincide)")
    # sum_ij |y_j - x_i|^2 without forming the n x m matrix
    sx = np.sum(X * X)
    sy = np.sum(Y * Y)
    cross = float(X.sum(axis=1) @ Y.sum(axis=1))
    total = m * sx + n * sy - 2.0 * cross
    sigma2 = total / (k * n * m)
    if sigma2 <= 0.0:
        raise AlignmentError("both clouds sit on one point; the variance is undefined")
    beta = kernel_width * scale
    G = np.exp(-_sqdist(X.T, X.T) / (2.0 * beta**2))
    return GmmAlignmentState(
        initial=X.copy(),
        weights=np.zeros((n, k)),
        kernel=G,
        sigma2=float(sigma2),
        sigma2_init=float(sigma2),
        kernel_width=beta,
        lam=float(lam),
        scale=scale,
    )


def em_step(state: GmmAlignmentState, data: np.ndarray, block: int | None = None) -> GmmAlignmentState:
    """One EM iteration: responsibilities, displacement solve, variance update."""
    Y = np.asarray(data, dtype=np.float64).T
    X = state.initial.T
    n, k = X.shape
    PY, P1, Np, _ = _estep(state, Y, block)
    G = state.kernel
    lhs = P1[:, None] * G
    lhs[np.diag_indices(n)] += state.reg_weight * state.sigma2
    W = np.linalg.solve(lhs, PY - P1[:, None] * X)
    T = X + G @ W
    yy = float(np.sum(Y * Y))  # each data point's responsibilities sum to one
    resid = yy - 2.0 * float(np.sum(PY * T)) + float(np.sum(P1 * np.sum(T * T, axis=1)))
    sigma2 = resid / (Np * k)
    floor = SIGMA_FLOOR * state.sigma2_init
    converged = False
    if not np.isfinite(sigma2) or sigma2 <= floor:
        sigma2 = floor
        converged = True
    return replace(state, weights=W, sigma2=float(sigma2), converged=converged, iteration=state.iteration + 1)


def run_alignment(
    clouds: EmbeddedCloudPair,
    lam: float = DEFAULT_LAMBDA,
    iterations: int = DEFAULT_ITERATIONS,
    kernel_width: float = DEFAULT_BETA,
    block: int | None = None,
) -> tuple[GmmAlignmentState, EmTrace]:
    """Run EM for ``iterations`` steps or until the objective stalls."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    Y = clouds.target_points
    state = init_alignment(clouds, lam, kernel_width)
    trace = EmTrace()
    prev = state.objective(Y, block)
    trace.record(state, prev)
    for _ in range(iterations):
        state = em_step(state, Y, block)
        obj = state.objective(Y, block)
        trace.record(state, obj)
        if state.converged:
            log.info("variance reached its floor after %d iterations", state.iteration)
            break
        if abs(prev - obj) < STOP_TOL * max(abs(prev), 1e-300):
            break
        prev = obj
    return state, trace


def posterior_map(state: GmmAlignmentState, clouds: EmbeddedCloudPair) -> RecoveryResult:
    """Assign each transformed centroid to the data point of highest component density.

    With equal weights and an isotropic variance this is the nearest data
    point to the moved centroid. The reported objective is the fidelity of
    the map on the original clouds, as for the other recovery methods.
    """
    idx, _ = nearest_columns(state.centroids, clouds.target_points)
    pm = PointMap(idx, clouds.n_target, LEFT_STOCHASTIC)
    return RecoveryResult(pm, fidelity(clouds, idx), state.iteration, "probabilistic")


def recover_probabilistic(
    clouds: EmbeddedCloudPair,
    lam: float = DEFAULT_LAMBDA,
    iterations: int = DEFAULT_ITERATIONS,
    kernel_width: float = DEFAULT_BETA,
) -> tuple[RecoveryResult, EmTrace]:
    state, trace = run_alignment(clouds, lam, iterations, kernel_width)
    return posterior_map(state, clouds), trace
