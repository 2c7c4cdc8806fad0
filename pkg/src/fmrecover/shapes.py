"""Synthetic meshes and shape pairs with known correspondence."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriangleMesh


def icosahedron(edge: float = 1.0) -> TriangleMesh:
    """Regular icosahedron with the given edge length."""
    t = (1.0 + 5**0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return TriangleMesh(v * (edge / 2.0), f)


def icosphere(subdivisions: int, radius: float = 1.0) -> TriangleMesh:
    """Loop-subdivided icosahedron projected to a sphere.

    Vertex counts are 10 * 4**s + 2: 12, 42, 162, 642, 2562, ...
    """
    base = icosahedron()
    verts = [tuple(p / np.linalg.norm(p)) for p in base.vertices]
    faces = [tuple(f) for f in base.faces]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = np.add(verts[a], verts[b])
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def fibonacci_sphere(n: int, radius: float = 1.0) -> TriangleMesh:
    """Sphere mesh with exactly ``n`` near-uniform vertices (convex hull of a Fibonacci lattice)."""
    if n < 4:
        raise ValueError("need at least 4 points")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - 5**0.5) * i
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return _hull_mesh(pts * radius)


def _hull_mesh(pts: np.ndarray) -> TriangleMesh:
    faces = ConvexHull(pts).simplices.copy()
    v = pts[faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", normal, v.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(pts, faces)


def random_sphere(n: int, seed: int = 0, radius: float = 1.0) -> TriangleMesh:
    """Sphere mesh on ``n`` uniformly random points.

    Irregular sampling (uneven vertex areas, some short edges) makes it a
    harder test bed than the near-uniform spheres above.
    """
    if n < 4:
        raise ValueError("need at least 4 points")
    pts = np.random.default_rng(seed).standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return _hull_mesh(pts * radius)


def grid_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> TriangleMesh:
    """Flat rectangle [0, width] x [0, height] split into 2*nx*ny triangles."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    v = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return TriangleMesh(v, f)


def strip_mesh(segments: int, spacing: float = 1.0, width: float = 1.0) -> TriangleMesh:
    """Two-row triangle strip; vertices 0..segments form the bottom chain."""
    return grid_mesh(segments, 1, segments * spacing, width)


def permuted_copy(mesh: TriangleMesh, seed: int) -> tuple[TriangleMesh, np.ndarray]:
    """Relabel vertices by a seeded random permutation.

    Returns the relabelled mesh and ``perm`` with ``perm[i]`` the new index of
    source vertex ``i`` (i.e. the ground-truth map).
    """
    perm = np.random.default_rng(seed).permutation(mesh.n)
    v = np.empty_like(mesh.vertices)
    v[perm] = mesh.vertices
    return TriangleMesh(v, perm[mesh.faces]), perm


def radial_field(mesh: TriangleMesh, seed: int) -> np.ndarray:
    """Smooth low-frequency scalar field in [-1, 1] built from random degree-1/2 harmonics."""
    rng = np.random.default_rng(seed)
    c = mesh.vertices.mean(axis=0)
    d = mesh.vertices - c
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    a = rng.standard_normal(3)
    a /= np.linalg.norm(a)
    b = rng.standard_normal(3)
    b /= np.linalg.norm(b)
    s = 0.6 * (u @ a) + 0.4 * (1.5 * (u @ b) ** 2 - 0.5)
    return s / np.abs(s).max()


def radial_deformation(mesh: TriangleMesh, magnitude: float, seed: int) -> TriangleMesh:
    """Scale each vertex radially about the centroid by ``1 + magnitude * s(x)``.

    Vertex order is unchanged, so the ground truth is the identity map.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return TriangleMesh(mesh.vertices, mesh.faces)
    c = mesh.vertices.mean(axis=0)
    s = radial_field(mesh, seed)
    v = c + (mesh.vertices - c) * (1.0 + magnitude * s)[:, None]
    return TriangleMesh(v, mesh.faces)
