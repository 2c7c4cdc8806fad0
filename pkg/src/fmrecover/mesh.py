"""Triangle meshes: validation, ASCII I/O, graph geodesics and sampling.

Vertex order is the identity of a correspondence, so nothing in this module
ever reorders vertices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

AREA_TOL = 1e-12


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshValidationError(ValueError):
    """Mesh data violates a structural invariant.

    ``kind`` names the element type ("face", "edge", "vertex") and ``index``
    the offending element.
    """

    def __init__(self, message: str, kind: str, index):
        super().__init__(f"{kind} {index}: {message}")
        self.kind = kind
        self.index = index


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Validated, immutable triangle mesh.

    Construction checks index range, degenerate faces, edge manifoldness and
    connectivity; use ``validate=False`` only for data that is known good.
    """

    vertices: np.ndarray
    faces: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (m, 3), got {f.shape}")
        if not np.issubdtype(f.dtype, np.integer):
            if not np.all(np.equal(np.mod(f, 1), 0)):
                raise ValueError("faces must contain integer indices")
        f = f.astype(np.int64)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.validate:
            self._check()

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    def _check(self):
        v, f = self.vertices, self.faces
        n = len(v)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v).all(axis=1))[0])
            raise MeshValidationError("non-finite coordinate", "vertex", bad)
        if len(f) == 0:
            raise MeshValidationError("mesh has no faces", "face", 0)
        out = (f < 0) | (f >= n)
        if out.any():
            bad = int(np.flatnonzero(out.any(axis=1))[0])
            raise MeshValidationError(
                f"vertex index out of range [0, {n})", "face", bad
            )
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshValidationError(
                "repeated vertex index", "face", int(np.flatnonzero(repeated)[0])
            )
        small = self.face_areas <= AREA_TOL
        if small.any():
            raise MeshValidationError(
                "zero-area face", "face", int(np.flatnonzero(small)[0])
            )
        e = self._directed_edges
        key = np.sort(e, axis=1)
        uniq, counts = np.unique(key, axis=0, return_counts=True)
        if (counts > 2).any():
            bad = tuple(int(i) for i in uniq[np.flatnonzero(counts > 2)[0]])
            raise MeshValidationError("edge shared by more than two faces", "edge", bad)
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshValidationError(
                "vertex not referenced by any face", "vertex", int(np.flatnonzero(~used)[0])
            )
        ncomp, labels = csgraph.connected_components(self.adjacency, directed=False)
        if ncomp > 1:
            bad = int(np.flatnonzero(labels != labels[0])[0])
            raise MeshValidationError(
                f"mesh has {ncomp} connected components", "vertex", bad
            )

    @cached_property
    def _directed_edges(self) -> np.ndarray:
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (E, 2)."""
        return np.unique(np.sort(self._directed_edges, axis=1), axis=0)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def face_areas(self) -> np.ndarray:
        v, f = self.vertices, self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric edge graph weighted by Euclidean edge length."""
        e, w = self.edges, self.edge_lengths
        n = self.n
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sparse.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)


# ---------------------------------------------------------------------------
# file I/O


def _data_lines(text: str):
    """Yield (line_number, tokens) for non-empty, non-comment lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _fan(poly: list[int]) -> list[list[int]]:
    return [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]


def _parse_off(text: str):
    lines = _data_lines(text)
    try:
        lineno, tok = next(lines)
    except StopIteration:
        raise MeshFormatError("empty file") from None
    head = tok[0]
    if not head.endswith("OFF"):
        raise MeshFormatError("missing OFF header", lineno)
    if head != "OFF":
        warnings.warn(f"{head} attributes ignored; only positions and faces are read")
    tok = tok[1:]
    if not tok:
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshFormatError("missing counts line") from None
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (IndexError, ValueError):
        raise MeshFormatError("bad counts line", lineno) from None
    verts, faces = [], []
    extra = False
    for _ in range(nv):
        try:
            lineno, tok = next(lines)
            verts.append([float(t) for t in tok[:3]])
        except StopIteration:
            raise MeshFormatError(f"expected {nv} vertices, found {len(verts)}") from None
        except ValueError:
            raise MeshFormatError("bad vertex coordinate", lineno) from None
        if len(verts[-1]) != 3:
            raise MeshFormatError("vertex needs 3 coordinates", lineno)
        extra |= len(tok) > 3
    polys = 0
    for _ in range(nf):
        try:
            lineno, tok = next(lines)
            cnt = int(tok[0])
            poly = [int(t) for t in tok[1 : 1 + cnt]]
        except StopIteration:
            raise MeshFormatError(f"expected {nf} faces, found {len(faces)}") from None
        except ValueError:
            raise MeshFormatError("bad face record", lineno) from None
        if cnt < 3 or len(poly) != cnt:
            raise MeshFormatError("face needs at least 3 indices", lineno)
        extra |= len(tok) > 1 + cnt
        polys += cnt > 3
        faces.extend(_fan(poly))
    if extra:
        warnings.warn("per-element attributes in OFF file ignored")
    if polys:
        warnings.warn(f"{polys} polygonal faces fan-triangulated")
    return verts, faces


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("missing ply magic", 1)
    elements = []  # (name, count, [properties])
    fmt = None
    end = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", i)
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            end = i
            break
    if end is None:
        raise MeshFormatError("missing end_header")
    if fmt != "ascii":
        raise MeshFormatError(f"only ASCII PLY is supported (format {fmt})")
    body = [(j, l.split()) for j, l in enumerate(lines[end:], start=end + 1) if l.strip()]
    pos = 0
    verts, faces = [], []
    ignored = set()
    polys = 0
    for name, count, props in elements:
        rows = body[pos : pos + count]
        if len(rows) != count:
            raise MeshFormatError(f"expected {count} {name} records, found {len(rows)}")
        pos += count
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                ix = [names.index(c) for c in "xyz"]
            except ValueError:
                raise MeshFormatError("vertex element lacks x, y, z") from None
            if any(p[0] == "list" for p in props):
                raise MeshFormatError("list properties on vertices are not supported")
            ignored.update(n for n in names if n not in "xyz")
            for lineno, tok in rows:
                try:
                    verts.append([float(tok[j]) for j in ix])
                except (IndexError, ValueError):
                    raise MeshFormatError("bad vertex record", lineno) from None
        elif name == "face":
            if not props or props[0][0] != "list":
                raise MeshFormatError("face element must start with a list property")
            if len(props) > 1:
                ignored.update(p[-1] for p in props[1:])
            for lineno, tok in rows:
                try:
                    cnt = int(tok[0])
                    poly = [int(t) for t in tok[1 : 1 + cnt]]
                except (IndexError, ValueError):
                    raise MeshFormatError("bad face record", lineno) from None
                if cnt < 3 or len(poly) != cnt:
                    raise MeshFormatError("face needs at least 3 indices", lineno)
                polys += cnt > 3
                faces.extend(_fan(poly))
        else:
            ignored.add(name)
    if ignored:
        warnings.warn(f"PLY attributes ignored: {sorted(ignored)}")
    if polys:
        warnings.warn(f"{polys} polygonal faces fan-triangulated")
    return verts, faces


def _parse_obj(text: str):
    verts, faces = [], []
    ignored = set()
    polys = 0
    for lineno, tok in _data_lines(text):
        kind = tok[0]
        if kind == "v":
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex coordinate", lineno) from None
            if len(verts[-1]) != 3:
                raise MeshFormatError("vertex needs 3 coordinates", lineno)
        elif kind == "f":
            poly = []
            for t in tok[1:]:
                try:
                    idx = int(t.split("/")[0])
                except ValueError:
                    raise MeshFormatError("bad face index", lineno) from None
                if idx == 0:
                    raise MeshFormatError("OBJ indices are 1-based", lineno)
                poly.append(idx - 1 if idx > 0 else len(verts) + idx)
            if len(poly) < 3:
                raise MeshFormatError("face needs at least 3 indices", lineno)
            polys += len(poly) > 3
            faces.extend(_fan(poly))
        else:
            ignored.add(kind)
    if ignored:
        warnings.warn(f"OBJ records ignored: {sorted(ignored)}")
    if polys:
        warnings.warn(f"{polys} polygonal faces fan-triangulated")
    return verts, faces


_PARSERS = {"off": _parse_off, "ply": _parse_ply, "obj": _parse_obj}


def _format_of(path: Path, format: str | None) -> str:
    fmt = (format or path.suffix.lstrip(".")).lower()
    fmt = {"ply-ascii": "ply"}.get(fmt, fmt)
    if fmt not in _PARSERS:
        raise ValueError(f"unsupported mesh format {fmt!r}; expected OFF, PLY or OBJ")
    return fmt


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OFF, ASCII PLY or OBJ file into a validated mesh.

    The format is inferred from the extension unless given explicitly.
    Binary PLY is rejected.
    """
    path = Path(path)
    fmt = _format_of(path, format)
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise MeshFormatError("file is not ASCII (binary meshes are not supported)") from None
    verts, faces = _PARSERS[fmt](text)
    if not verts:
        raise MeshFormatError("no vertices")
    return TriangleMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _num(x: float) -> str:
    return format(float(x), ".17g")


def save_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    """Write ``mesh`` in ASCII with 17 significant digits (lossless)."""
    path = Path(path)
    fmt = _format_of(path, format)
    v, f = mesh.vertices, mesh.faces
    vlines = [" ".join(_num(c) for c in p) for p in v]
    if fmt == "off":
        out = ["OFF", f"{len(v)} {len(f)} 0", *vlines]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    elif fmt == "ply":
        out = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(v)}",
            "property double x",
            "property double y",
            "property double z",
            f"element face {len(f)}",
            "property list uchar int vertex_indices",
            "end_header",
            *vlines,
        ]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    else:
        out = [f"v {l}" for l in vlines]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# geodesics


@dataclass(frozen=True, eq=False)
class GeodesicField:
    source: int
    distances: np.ndarray
    normalization: float

    @property
    def normalized(self) -> np.ndarray:
        return self.distances / self.normalization


def _check_vertex(mesh: TriangleMesh, v) -> int:
    v = int(v)
    if not 0 <= v < mesh.n:
        raise IndexError(f"vertex {v} out of range [0, {mesh.n})")
    return v


def geodesic_distances(mesh: TriangleMesh, source: int) -> GeodesicField:
    """Dijkstra distances from ``source`` over the Euclidean edge graph.

    This is the usual graph approximation of surface geodesics; it
    overestimates true distances by a mesh-dependent factor.
    """
    source = _check_vertex(mesh, source)
    d = csgraph.dijkstra(mesh.adjacency, directed=False, indices=source)
    return GeodesicField(source, _frozen(d), float(np.sqrt(mesh.area)))


def geodesic_matrix(mesh: TriangleMesh, sources, block: int = 256) -> np.ndarray:
    """Distances from each of ``sources`` to all vertices, shape (len(sources), n)."""
    sources = np.asarray(sources, dtype=np.int64)
    out = np.empty((len(sources), mesh.n))
    for s in range(0, len(sources), block):
        idx = sources[s : s + block]
        out[s : s + block] = csgraph.dijkstra(mesh.adjacency, directed=False, indices=idx)
    return out


def farthest_point_sample(mesh: TriangleMesh, count: int, seed: int = 0) -> list[int]:
    """Greedy farthest-point sampling under the graph geodesic metric.

    Ties are broken by lowest vertex index, so prefixes of a longer sample
    equal shorter samples.
    """
    seed = _check_vertex(mesh, seed)
    if not 1 <= count <= mesh.n:
        raise ValueError(f"count must be in [1, {mesh.n}], got {count}")
    picked = [seed]
    mind = geodesic_distances(mesh, seed).distances.copy()
    while len(picked) < count:
        nxt = int(np.argmax(mind))
        picked.append(nxt)
        np.minimum(mind, geodesic_distances(mesh, nxt).distances, out=mind)
    return picked


def voronoi_labels(mesh: TriangleMesh, centers) -> np.ndarray:
    """Label each vertex with the index (into ``centers``) of its geodesically nearest center."""
    d = geodesic_matrix(mesh, centers)
    return np.argmin(d, axis=0)
