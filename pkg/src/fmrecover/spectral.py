"""Cotangent Laplace-Beltrami operator and truncated eigenbases."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .mesh import TriangleMesh, _frozen

log = logging.getLogger(__name__)

MODES = ("mass-weighted", "uniform")
COT_LIMIT = 1e8
DENSE_LIMIT = 3000
RESIDUAL_TOL = 1e-6


class EigensolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (max relative residual {residual:.3e})")
        self.residual = residual


class DegenerateTriangleError(ValueError):
    def __init__(self, face: int, cot: float):
        super().__init__(f"face {face}: cotangent {cot:.3e} exceeds {COT_LIMIT:.0e}")
        self.face = face


@dataclass(frozen=True, eq=False)
class LaplacianPair:
    stiffness: sparse.csr_matrix
    mass: sparse.dia_matrix

    @property
    def mass_diagonal(self) -> np.ndarray:
        return self.mass.diagonal()


def mesh_id(mesh: TriangleMesh) -> str:
    h = hashlib.sha1(mesh.vertices.tobytes())
    h.update(mesh.faces.tobytes())
    return h.hexdigest()[:16]


def cotangents(mesh: TriangleMesh) -> np.ndarray:
    """Cotangent of the interior angle at each face corner, shape (m, 3)."""
    v, f = mesh.vertices, mesh.faces
    cot = np.empty(f.shape)
    for c in range(3):
        a = v[f[:, c]]
        e1 = v[f[:, (c + 1) % 3]] - a
        e2 = v[f[:, (c + 2) % 3]] - a
        dot = np.einsum("ij,ij->i", e1, e2)
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot[:, c] = dot / cross
    return cot


def build_laplacian(mesh: TriangleMesh) -> LaplacianPair:
    """Cotangent stiffness matrix and lumped barycentric mass matrix.

    The stiffness matrix is positive semi-definite: off-diagonal entries are
    ``-(cot a + cot b) / 2`` for the two angles opposite an edge.
    """
    f = mesh.faces
    n = mesh.n
    cot = cotangents(mesh)
    bad = ~np.isfinite(cot) | (np.abs(cot) > COT_LIMIT)
    if bad.any():
        face = int(np.flatnonzero(bad.any(axis=1))[0])
        raise DegenerateTriangleError(face, float(np.abs(cot[face]).max()))
    # corner c is opposite edge (c+1, c+2)
    i = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = 0.5 * np.concatenate([cot[:, 0], cot[:, 1], cot[:, 2]])
    W = sparse.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    W = W + W.T
    S = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    S = S.tocsr()
    S.sum_duplicates()
    area = np.zeros(n)
    np.add.at(area, f.ravel(), np.repeat(mesh.face_areas / 3.0, 3))
    return LaplacianPair(S, sparse.diags(area).todia())


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """First ``k`` eigenfunctions sampled at vertices.

    ``weights`` are the inner-product weights: lumped vertex areas in
    mass-weighted mode, ones in uniform mode. The adjoint ``functions.T *
    weights`` maps vertex functions to coefficients in either mode.
    """

    functions: np.ndarray
    eigenvalues: np.ndarray
    weights: np.ndarray
    mode: str = "mass-weighted"
    mesh_id: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        phi = np.asarray(self.functions, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError("functions must be an (n, k) matrix")
        lam = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if lam.shape[0] != phi.shape[1] or w.shape[0] != phi.shape[0]:
            raise ValueError("eigenvalues/weights do not match functions shape")
        object.__setattr__(self, "functions", _frozen(phi))
        object.__setattr__(self, "eigenvalues", _frozen(lam))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n(self) -> int:
        return self.functions.shape[0]

    @property
    def k(self) -> int:
        return self.functions.shape[1]

    @cached_property
    def adjoint(self) -> np.ndarray:
        """Coefficient operator, shape (k, n)."""
        a = (self.functions * self.weights[:, None]).T.copy()
        a.setflags(write=False)
        return a

    def truncate(self, k: int) -> "SpectralBasis":
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate a rank-{self.k} basis to {k}")
        return SpectralBasis(
            self.functions[:, :k], self.eigenvalues[:k], self.weights, self.mode, self.mesh_id
        )


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(phi), axis=0)
    s = np.sign(phi[idx, np.arange(phi.shape[1])])
    s[s == 0] = 1.0
    return phi * s


def _residuals(S, mass, lam, phi) -> np.ndarray:
    Sphi = S @ phi
    r = np.linalg.norm(Sphi - (mass[:, None] * phi) * lam, axis=0)
    scale = abs(S).sum(axis=1).max() * np.linalg.norm(phi, axis=0)
    denom = np.maximum(np.linalg.norm(Sphi, axis=0), 1e-8 * scale)
    return r / denom


def _dense_eigs(S, mass, k):
    lam, phi = scipy.linalg.eigh(
        S.toarray(), np.diag(mass), subset_by_index=[0, k - 1], driver="gvx"
    )
    return lam, phi


def _sparse_eigs(S, M, k):
    n = S.shape[0]
    # S is singular, so shift just below zero
    shift = -1e-8 * float(S.diagonal().mean() / M.diagonal().mean())
    v0 = np.random.default_rng(0).standard_normal(n)
    # Lanczos from one start vector can skip copies of a repeated eigenvalue;
    # extra Ritz pairs past the requested ones recover full clusters
    m = min(k + max(10, k // 2), n - 2)
    lam, phi = eigsh(
        S.tocsc(), k=m, M=M.tocsc(), sigma=shift, which="LM", v0=v0,
        tol=1e-10, maxiter=300 * m,
    )
    order = np.argsort(lam, kind="stable")[:k]
    return lam[order], phi[:, order]


def compute_basis(lap: LaplacianPair, k: int, mode: str = "mass-weighted", mesh_id: str = "") -> SpectralBasis:
    """The ``k`` lowest eigenpairs of ``S phi = lam M phi``.

    In uniform mode the functions are those of the symmetrically normalised
    operator ``M^-1/2 S M^-1/2``, i.e. ``M^1/2 phi``, orthonormal under the
    plain dot product.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    S = lap.stiffness
    mass = lap.mass_diagonal
    n = S.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    lam = phi = None
    if k < n - 1:
        try:
            lam, phi = _sparse_eigs(S, lap.mass, k)
        except ArpackNoConvergence as exc:
            if n > DENSE_LIMIT:
                raise EigensolverError("shift-invert Lanczos did not converge", np.inf) from exc
            log.warning("sparse eigensolver failed (%s); using dense solver", exc)
    if lam is not None:
        order = np.argsort(lam, kind="stable")
        lam, phi = lam[order], phi[:, order]
        # M-normalise explicitly; ARPACK returns M-orthonormal vectors only to tolerance
        phi = phi / np.sqrt(np.einsum("ij,i,ij->j", phi, mass, phi))
        res = _residuals(S, mass, lam, phi)
        if res.max() > RESIDUAL_TOL:
            if n > DENSE_LIMIT:
                raise EigensolverError("eigenpairs failed the residual check", float(res.max()))
            log.warning("sparse eigenpairs inaccurate (%.2e); using dense solver", res.max())
            lam = None
    if lam is None:
        lam, phi = _dense_eigs(S, mass, k)
        res = _residuals(S, mass, lam, phi)
        if res.max() > RESIDUAL_TOL:
            raise EigensolverError("dense eigensolver failed the residual check", float(res.max()))
    lam = np.where(np.abs(lam) < 1e-12 * max(abs(lam[-1]), 1.0), 0.0, lam)
    lam = np.maximum(lam, 0.0)
    if mode == "uniform":
        phi = phi * np.sqrt(mass)[:, None]
        weights = np.ones(n)
    else:
        weights = mass
    return SpectralBasis(_fix_signs(phi), lam, weights, mode, mesh_id)


def mesh_basis(mesh: TriangleMesh, k: int, mode: str = "mass-weighted") -> SpectralBasis:
    """Convenience wrapper: Laplacian plus eigenbasis for ``mesh``."""
    return compute_basis(build_laplacian(mesh), k, mode, mesh_id(mesh))


def save_basis(basis: SpectralBasis, path) -> None:
    """Plain-text export: header ``n k mode eigenvalues...`` then one row per vertex."""
    head = [str(basis.n), str(basis.k), basis.mode] + [format(x, ".17g") for x in basis.eigenvalues]
    rows = [" ".join(format(x, ".17g") for x in r) for r in basis.functions]
    Path(path).write_text(" ".join(head) + "\n" + "\n".join(rows) + "\n")


def load_basis(path, mesh: TriangleMesh | None = None) -> SpectralBasis:
    """Read a basis written by :func:`save_basis` or supplied externally.

    Mass-weighted bases need ``mesh`` to recover the inner-product weights.
    """
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    n, k, mode = int(head[0]), int(head[1]), head[2]
    lam = np.array([float(x) for x in head[3 : 3 + k]])
    phi = np.array([[float(x) for x in l.split()] for l in lines[1 : 1 + n]])
    if phi.shape != (n, k):
        raise ValueError(f"basis file declares {n}x{k} but holds {phi.shape}")
    if mode == "mass-weighted":
        if mesh is None:
            raise ValueError("a mass-weighted basis needs its mesh to recover vertex areas")
        if mesh.n != n:
            raise ValueError(f"basis has {n} rows but mesh has {mesh.n} vertices")
        weights = build_laplacian(mesh).mass_diagonal
        mid = mesh_id(mesh)
    else:
        weights = np.ones(n)
        mid = mesh_id(mesh) if mesh is not None else ""
    return SpectralBasis(phi, lam, weights, mode, mid)
