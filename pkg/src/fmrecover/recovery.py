"""Point-wise map recovery from a functional map.

All methods compare the images of source delta functions, the columns of
``C Phi^+``, with the target deltas, the columns of ``Psi^+``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .fmap import LEFT_STOCHASTIC, PERMUTATION, FunctionalMap, PointMap
from .mesh import _frozen
from .neighbors import assignment_sqdist, nearest_columns, pair_sqdist, pairwise_sqdist

log = logging.getLogger(__name__)

LAP_MAX_SIZE = 512
BALANCED_LAMBDA = 1.0
BALANCED_ROUNDS = 20


@dataclass(frozen=True, eq=False)
class EmbeddedCloudPair:
    """Source and target delta images in R^k, stored as columns.

    ``source_coefficients`` keeps the bare source adjoint ``Phi^+`` (before
    applying C); the map-update rules need it.
    """

    source_points: np.ndarray
    target_points: np.ndarray
    source_coefficients: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.source_points, dtype=np.float64)
        Y = np.asarray(self.target_points, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError(f"clouds must share their dimension: {X.shape} vs {Y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("clouds must be finite")
        object.__setattr__(self, "source_points", _frozen(X))
        object.__setattr__(self, "target_points", _frozen(Y))
        if self.source_coefficients is not None:
            A = np.asarray(self.source_coefficients, dtype=np.float64)
            if A.shape[1] != X.shape[1]:
                raise ValueError("source coefficients must have one column per source point")
            object.__setattr__(self, "source_coefficients", _frozen(A))

    @property
    def k(self) -> int:
        return self.source_points.shape[0]

    @property
    def n_source(self) -> int:
        return self.source_points.shape[1]

    @property
    def n_target(self) -> int:
        return self.target_points.shape[1]

    def swapped(self) -> "EmbeddedCloudPair":
        return EmbeddedCloudPair(self.target_points, self.source_points)


@dataclass(frozen=True, eq=False)
class RecoveryResult:
    map: PointMap
    objective: float
    iterations: int
    method: str
    history: tuple = field(default=(), repr=False)


def embed(fmap: FunctionalMap) -> EmbeddedCloudPair:
    """Columns of ``C Phi^+`` (source) and ``Psi^+`` (target)."""
    A = fmap.source_basis.adjoint
    return EmbeddedCloudPair(fmap.matrix @ A, fmap.target_basis.adjoint, A)


def fidelity(clouds: EmbeddedCloudPair, assignment) -> float:
    """``|X - Y P|_F^2`` for the point map given by ``assignment``."""
    return float(assignment_sqdist(clouds.source_points, clouds.target_points, assignment).sum())


def recover_max(fmap: FunctionalMap, block: int = 1024) -> RecoveryResult:
    """Map each source vertex to the maximum of its transported indicator function."""
    Psi = fmap.target_basis.functions
    X = fmap.matrix @ fmap.source_basis.adjoint
    n = X.shape[1]
    out = np.empty(n, dtype=np.int64)
    for s in range(0, n, block):
        g = Psi @ X[:, s : s + block]
        out[s : s + block] = np.argmax(g, axis=0)
    pm = PointMap(out, Psi.shape[0], LEFT_STOCHASTIC)
    return RecoveryResult(pm, fidelity(embed(fmap), out), 1, "max")


def recover_nn(clouds: EmbeddedCloudPair, method: str = "auto") -> RecoveryResult:
    """Independent nearest target for each source column."""
    idx, d = nearest_columns(clouds.source_points, clouds.target_points, method)
    pm = PointMap(idx, clouds.n_target, LEFT_STOCHASTIC)
    return RecoveryResult(pm, float(d.sum()), 1, "nn")


def _coupled_step(Q, P, nn_idx, nn_d, partner, lam):
    """One half-step of the balanced scheme for the queries ``Q`` against ``P``.

    ``partner[i]`` is the query that point ``i`` currently maps back to;
    choosing ``i`` for that query earns a ``-2 lam`` bonus. Returns indices
    and their plain squared distances.
    """
    m = len(Q)
    pts = np.arange(len(P))
    bonus_d = pair_sqdist(Q, P, partner, pts)
    cost = bonus_d - 2.0 * lam
    # best bonus candidate per query (lowest cost, then lowest index)
    order = np.lexsort((pts, cost, partner))
    q_sorted = partner[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = q_sorted[1:] != q_sorted[:-1]
    best = order[first]
    has = np.zeros(m, dtype=bool)
    has[partner[best]] = True
    b_idx = np.full(m, -1, dtype=np.int64)
    b_cost = np.full(m, np.inf)
    b_d = np.full(m, np.inf)
    b_idx[partner[best]] = best
    b_cost[partner[best]] = cost[best]
    b_d[partner[best]] = bonus_d[best]
    # nearest neighbour wins only if strictly cheaper, or equal with lower index
    take_nn = (nn_d < b_cost) | ((nn_d == b_cost) & (nn_idx < b_idx))
    take_nn |= ~has
    idx = np.where(take_nn, nn_idx, b_idx)
    d = np.where(take_nn, nn_d, b_d)
    return idx, d


def balanced_objective(d_fwd, d_bwd, p, q, lam) -> float:
    consistent = int(np.count_nonzero(q[p] == np.arange(len(p))))
    return float(d_fwd.sum() + d_bwd.sum() + lam * (len(p) + len(q) - 2 * consistent))


def balanced_assignments(
    clouds: EmbeddedCloudPair,
    lam: float = BALANCED_LAMBDA,
    max_rounds: int = BALANCED_ROUNDS,
    init: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Alternating minimisation of the symmetrised nearest-neighbour energy.

    Returns ``(p, q, rounds, history)``, where ``p`` maps source to target,
    ``q`` maps target to source and ``history`` lists the full objective
    after initialisation and after every half-step.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    X = np.ascontiguousarray(clouds.source_points.T)
    Y = np.ascontiguousarray(clouds.target_points.T)
    nn_p, nn_pd = nearest_columns(clouds.source_points, clouds.target_points)
    nn_q, nn_qd = nearest_columns(clouds.target_points, clouds.source_points)
    if init is None:
        p, dp, q, dq = nn_p, nn_pd, nn_q, nn_qd
    else:
        p = np.asarray(init[0], dtype=np.int64)
        q = np.asarray(init[1], dtype=np.int64)
        dp = pair_sqdist(X, Y, np.arange(len(p)), p)
        dq = pair_sqdist(Y, X, np.arange(len(q)), q)
    history = [balanced_objective(dp, dq, p, q, lam)]
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        p_new, dp = _coupled_step(X, Y, nn_p, nn_pd, q, lam)
        history.append(balanced_objective(dp, dq, p_new, q, lam))
        q_new, dq = _coupled_step(Y, X, nn_q, nn_qd, p_new, lam)
        history.append(balanced_objective(dp, dq, p_new, q_new, lam))
        done = np.array_equal(p_new, p) and np.array_equal(q_new, q)
        p, q = p_new, q_new
        if done:
            break
    return p, q, rounds, history


def recover_balanced_nn(
    clouds: EmbeddedCloudPair, lam: float = BALANCED_LAMBDA, max_rounds: int = BALANCED_ROUNDS
) -> RecoveryResult:
    """Forward map of the balanced (symmetrised) nearest-neighbour scheme."""
    p, q, rounds, history = balanced_assignments(clouds, lam, max_rounds)
    pm = PointMap(p, clouds.n_target, LEFT_STOCHASTIC)
    return RecoveryResult(pm, fidelity(clouds, p), rounds, "balanced_nn", tuple(history))


def recover_lap_oracle(clouds: EmbeddedCloudPair) -> RecoveryResult:
    """Optimal permutation for ``|X - Y P|_F^2``; only for small meshes."""
    n = clouds.n_source
    if n != clouds.n_target:
        raise ValueError(f"assignment needs equal vertex counts, got {n} and {clouds.n_target}")
    if n > LAP_MAX_SIZE:
        raise ValueError(f"linear assignment limited to n <= {LAP_MAX_SIZE}, got {n}")
    cost = pairwise_sqdist(clouds.source_points, clouds.target_points)
    rows, cols = linear_sum_assignment(cost)
    assign = np.empty(n, dtype=np.int64)
    assign[rows] = cols
    pm = PointMap(assign, n, PERMUTATION)
    return RecoveryResult(pm, fidelity(clouds, assign), 1, "lap")
