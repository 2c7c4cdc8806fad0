"""Exact nearest-neighbour search between column point sets.

Two candidate generators (a k-d tree for low dimension, blocked brute force
otherwise) feed one exact selection step, so both paths return bit-identical
indices and distances. Ties go to the lowest target index.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

TREE_MAX_DIM = 32
_REL_SLACK = 1e-8


def pair_sqdist(Q: np.ndarray, P: np.ndarray, qi: np.ndarray, pj: np.ndarray) -> np.ndarray:
    """Squared distances between rows ``Q[qi]`` and ``P[pj]``.

    Accumulates one coordinate at a time, so the result for a pair does not
    depend on which other pairs are evaluated alongside it.
    """
    acc = np.zeros(len(qi))
    for d in range(Q.shape[1]):
        diff = Q[qi, d] - P[pj, d]
        acc += diff * diff
    return acc


def _select(Q, P, qi, pj, m):
    """Pick, per query, the candidate with least exact distance (then lowest index)."""
    dist = pair_sqdist(Q, P, qi, pj)
    order = np.lexsort((pj, dist, qi))
    qi, pj, dist = qi[order], pj[order], dist[order]
    first = np.ones(len(qi), dtype=bool)
    first[1:] = qi[1:] != qi[:-1]
    idx = np.empty(m, dtype=np.int64)
    out = np.empty(m)
    idx[qi[first]] = pj[first]
    out[qi[first]] = dist[first]
    return idx, out


def _candidates_brute(Q, P, block):
    pp = np.einsum("ij,ij->i", P, P)
    qis, pjs = [], []
    for s in range(0, len(Q), block):
        q = Q[s : s + block]
        qq = np.einsum("ij,ij->i", q, q)
        D = qq[:, None] + pp[None, :] - 2.0 * (q @ P.T)
        dmin = D.min(axis=1)
        tol = _REL_SLACK * (qq + pp.max()) + 1e-300
        r, c = np.nonzero(D <= (dmin + tol)[:, None])
        qis.append(r + s)
        pjs.append(c)
    return np.concatenate(qis), np.concatenate(pjs)


def _candidates_tree(Q, P):
    tree = cKDTree(P)
    d, _ = tree.query(Q, k=1)
    scale = np.sqrt(np.einsum("ij,ij->i", Q, Q)) + np.sqrt(np.einsum("ij,ij->i", P, P).max())
    r = d + _REL_SLACK * scale + 1e-300
    lists = tree.query_ball_point(Q, r)
    qi = np.repeat(np.arange(len(Q)), [len(l) for l in lists])
    pj = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=len(qi))
    return qi, pj


def nearest_columns(
    queries: np.ndarray, points: np.ndarray, method: str = "auto", block: int = 512
) -> tuple[np.ndarray, np.ndarray]:
    """For each column of ``queries`` (k, m) the nearest column of ``points`` (k, n).

    Returns ``(index, squared_distance)``, both of length m.
    """
    Q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).T)
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).T)
    if Q.shape[1] != P.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {P.shape[1]}")
    if len(P) == 0:
        raise ValueError("no points to search")
    if method == "auto":
        method = "tree" if Q.shape[1] <= TREE_MAX_DIM else "brute"
    if method == "tree":
        qi, pj = _candidates_tree(Q, P)
    elif method == "brute":
        qi, pj = _candidates_brute(Q, P, block)
    else:
        raise ValueError(f"unknown search method {method!r}")
    return _select(Q, P, qi, pj, len(Q))


def assignment_sqdist(source: np.ndarray, target: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Per-column squared distance between ``source[:, j]`` and ``target[:, assignment[j]]``."""
    Q = np.ascontiguousarray(np.asarray(source, dtype=np.float64).T)
    P = np.ascontiguousarray(np.asarray(target, dtype=np.float64).T)
    a = np.asarray(assignment, dtype=np.int64)
    return pair_sqdist(Q, P, np.arange(len(a)), a)


def pairwise_sqdist(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Full (m, n) matrix of exact squared distances between columns."""
    Q = np.ascontiguousarray(np.asarray(source, dtype=np.float64).T)
    P = np.ascontiguousarray(np.asarray(target, dtype=np.float64).T)
    m, n = len(Q), len(P)
    qi = np.repeat(np.arange(m), n)
    pj = np.tile(np.arange(n), m)
    return pair_sqdist(Q, P, qi, pj).reshape(m, n)
