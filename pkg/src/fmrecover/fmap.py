"""Functional-map algebra and point-map containers.

A point map never becomes a dense n x n matrix; everything that involves it
gathers or scatters rows through the assignment array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh, _frozen, farthest_point_sample, voronoi_labels
from .spectral import SpectralBasis

PERMUTATION = "permutation"
LEFT_STOCHASTIC = "left-stochastic"
DEFAULT_RIDGE = 1e-9


@dataclass(frozen=True, eq=False)
class PointMap:
    """Image ``assignment[i]`` on the target of each source vertex ``i``."""

    assignment: np.ndarray
    n_target: int
    kind: str = LEFT_STOCHASTIC

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.ndim != 1:
            raise ValueError("assignment must be one-dimensional")
        if a.size and not np.issubdtype(a.dtype, np.integer):
            raise ValueError("assignment must hold integer indices")
        a = a.astype(np.int64)
        if a.size and (a.min() < 0 or a.max() >= self.n_target):
            bad = int(np.flatnonzero((a < 0) | (a >= self.n_target))[0])
            raise ValueError(f"source vertex {bad}: image {a[bad]} out of range [0, {self.n_target})")
        if self.kind == PERMUTATION:
            if len(a) != self.n_target or len(np.unique(a)) != len(a):
                raise ValueError("assignment is not a bijection")
        elif self.kind != LEFT_STOCHASTIC:
            raise ValueError(f"unknown point-map kind {self.kind!r}")
        object.__setattr__(self, "assignment", _frozen(a))

    @property
    def n_source(self) -> int:
        return len(self.assignment)

    def is_bijective(self) -> bool:
        return self.n_source == self.n_target and len(np.unique(self.assignment)) == self.n_source

    def inverse(self) -> "PointMap":
        if not self.is_bijective():
            raise ValueError("only bijective maps can be inverted")
        inv = np.empty_like(self.assignment)
        inv[self.assignment] = np.arange(self.n_source)
        return PointMap(inv, self.n_source, PERMUTATION)

    def compose(self, other: "PointMap") -> "PointMap":
        """``other`` after ``self``."""
        kind = PERMUTATION if self.kind == other.kind == PERMUTATION else LEFT_STOCHASTIC
        return PointMap(other.assignment[self.assignment], other.n_target, kind)

    def as_permutation(self) -> "PointMap":
        return PointMap(self.assignment, self.n_target, PERMUTATION)

    @classmethod
    def identity(cls, n: int) -> "PointMap":
        return cls(np.arange(n), n, PERMUTATION)


def exact_match_rate(map: PointMap, truth: PointMap) -> float:
    """Fraction of source vertices mapped to exactly their ground-truth image."""
    if map.n_source != truth.n_source:
        raise ValueError("maps have different source sizes")
    return float(np.mean(map.assignment == truth.assignment))


def apply_map(map: PointMap, f: np.ndarray) -> np.ndarray:
    """Transport rows of ``f`` (functions on the source) to the target: ``P @ f``.

    Rows of target vertices hit several times are summed; unhit rows are zero.
    """
    f = np.asarray(f)
    out = np.zeros((map.n_target,) + f.shape[1:], dtype=np.result_type(f, np.float64))
    np.add.at(out, map.assignment, f)
    return out


@dataclass(frozen=True, eq=False)
class FunctionalMap:
    """Matrix ``C`` taking source coefficients to target coefficients, shape (k_N, k_M)."""

    matrix: np.ndarray
    source_basis: SpectralBasis
    target_basis: SpectralBasis

    def __post_init__(self):
        C = np.asarray(self.matrix, dtype=np.float64)
        if C.shape != (self.target_basis.k, self.source_basis.k):
            raise ValueError(
                f"matrix shape {C.shape} does not match bases "
                f"({self.target_basis.k}, {self.source_basis.k})"
            )
        if not np.all(np.isfinite(C)):
            raise ValueError("functional map has non-finite entries")
        object.__setattr__(self, "matrix", _frozen(C))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def with_matrix(self, C: np.ndarray) -> "FunctionalMap":
        return FunctionalMap(C, self.source_basis, self.target_basis)

    def truncate(self, k_target: int, k_source: int | None = None) -> "FunctionalMap":
        k_source = k_target if k_source is None else k_source
        return FunctionalMap(
            self.matrix[:k_target, :k_source],
            self.source_basis.truncate(k_source),
            self.target_basis.truncate(k_target),
        )


def _check_modes(a: SpectralBasis, b: SpectralBasis):
    if a.mode != b.mode:
        raise ValueError(f"inner-product modes differ: {a.mode} vs {b.mode}")


def fmap_from_pointmap(map: PointMap, source_basis: SpectralBasis, target_basis: SpectralBasis) -> FunctionalMap:
    """``C = Psi^+ P Phi``: the functional map induced by a point map."""
    _check_modes(source_basis, target_basis)
    if map.n_source != source_basis.n or map.n_target != target_basis.n:
        raise ValueError("point map does not match the basis sizes")
    moved = apply_map(map, source_basis.functions)
    return FunctionalMap(target_basis.adjoint @ moved, source_basis, target_basis)


def solve_constraints(A: np.ndarray, B: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """``argmin_C |C A - B|^2 + ridge |C|^2`` via the normal equations."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1] or A.shape[1] < 1:
        raise ValueError(f"need A (k_M, m) and B (k_N, m) with m >= 1, got {A.shape}, {B.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("constraint matrices must be finite")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    G = A @ A.T
    if ridge == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise np.linalg.LinAlgError(
            "A A^T is rank deficient; use a positive ridge or more constraints"
        )
    G = G + ridge * np.eye(G.shape[0])
    # C G = B A^T, G symmetric
    return np.linalg.solve(G, (B @ A.T).T).T


def fmap_from_constraints(A, B, source_basis: SpectralBasis, target_basis: SpectralBasis, ridge: float = DEFAULT_RIDGE) -> FunctionalMap:
    """Least-squares functional map from paired coefficient columns ``C A ~ B``."""
    return FunctionalMap(solve_constraints(A, B, ridge), source_basis, target_basis)


def delta_coefficients(basis: SpectralBasis, vertex: int) -> np.ndarray:
    """Coefficients of the indicator function at ``vertex``, so ``Phi @ c`` is its rank-k projection."""
    vertex = int(vertex)
    if not 0 <= vertex < basis.n:
        raise IndexError(f"vertex {vertex} out of range [0, {basis.n})")
    return basis.adjoint[:, vertex].copy()


def perturb_fmap(fmap: FunctionalMap, noise_level: float, rng_seed: int = 0) -> FunctionalMap:
    """Add i.i.d. Gaussian noise with std ``noise_level * |C|_F / k``."""
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    C = fmap.matrix
    if noise_level == 0:
        return fmap.with_matrix(C)
    k = np.sqrt(C.shape[0] * C.shape[1])
    std = noise_level * np.linalg.norm(C) / k
    noise = np.random.default_rng(rng_seed).standard_normal(C.shape)
    return fmap.with_matrix(C + std * noise)


def region_indicators(labels: np.ndarray, count: int) -> np.ndarray:
    """One-hot indicator matrix (n, count) for integer region labels."""
    ind = np.zeros((len(labels), count))
    ind[np.arange(len(labels)), labels] = 1.0
    return ind


def voronoi_constraints(
    source: TriangleMesh,
    source_basis: SpectralBasis,
    target_basis: SpectralBasis,
    truth: PointMap,
    regions: int,
    seed_vertex: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient matrices (A, B) for geodesic Voronoi regions on the source and their ground-truth images."""
    centers = farthest_point_sample(source, regions, seed_vertex)
    ind = region_indicators(voronoi_labels(source, centers), regions)
    A = source_basis.adjoint @ ind
    B = target_basis.adjoint @ apply_map(truth, ind)
    return A, B


# ---------------------------------------------------------------------------
# text formats


def save_fmap(fmap: FunctionalMap | np.ndarray, path) -> None:
    C = fmap.matrix if isinstance(fmap, FunctionalMap) else np.asarray(fmap)
    rows = [" ".join(format(x, ".17g") for x in r) for r in C]
    Path(path).write_text(f"{C.shape[0]} {C.shape[1]}\n" + "\n".join(rows) + "\n")


def load_fmap_matrix(path) -> np.ndarray:
    lines = Path(path).read_text().split("\n")
    kn, km = (int(x) for x in lines[0].split())
    C = np.array([[float(x) for x in l.split()] for l in lines[1:] if l.strip()])
    if C.shape != (kn, km):
        raise ValueError(f"functional map file declares {kn}x{km} but holds {C.shape}")
    return C


def save_pointmap(map: PointMap, path) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in map.assignment))


def load_pointmap(path, n_target: int, kind: str = LEFT_STOCHASTIC) -> PointMap:
    """Read one 0-based target index per line; line ``i`` is the image of source vertex ``i``."""
    vals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            vals.append(int(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not an integer index: {line!r}") from None
    return PointMap(np.array(vals, dtype=np.int64), n_target, kind)
