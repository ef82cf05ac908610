"""Triangle mesh container and OBJ/PLY file I/O.

Positions are in meters. Meshes are cleaned at load time (duplicate and
degenerate faces dropped) and treated as immutable afterwards; all
downstream operators may share a mesh between threads.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

DEGENERATE_AREA = 1e-12  # m^2, faces below this are dropped at load


class MeshError(ValueError):
    """Malformed mesh data or unreadable mesh file."""


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a mesh surface: triangle index plus barycentric coords."""

    triangle_id: int
    barycentric: np.ndarray  # (3,) nonnegative, sums to 1

    def __post_init__(self):
        bary = np.asarray(self.barycentric, dtype=np.float64)
        if bary.shape != (3,):
            raise MeshError("barycentric coordinates must have shape (3,)")
        if np.any(bary < -1e-9) or abs(bary.sum() - 1.0) > 1e-9:
            raise MeshError(f"invalid barycentric coordinates {bary}")
        object.__setattr__(self, "barycentric", bary)

    def position(self, mesh: "TriangleMesh") -> np.ndarray:
        """World position of the point on `mesh`."""
        tri = mesh.triangles[self.triangle_id]
        return self.barycentric @ mesh.vertices[tri]

    def nearest_vertex(self, mesh: "TriangleMesh") -> int:
        """Index of the triangle corner closest (Euclidean) to the point."""
        tri = mesh.triangles[self.triangle_id]
        corners = mesh.vertices[tri]
        d = np.linalg.norm(corners - self.position(mesh), axis=1)
        return int(tri[int(np.argmin(d))])


class TriangleMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : (D, 3) float array
        Vertex positions in meters.
    triangles : (T, 3) int array
        Vertex-index triples.
    colors : (D, 3) float array, optional
        Per-vertex RGB in [0, 1].
    cleanup : bool
        Drop duplicate and degenerate (area <= 1e-12 m^2) faces. The
        number of dropped faces is recorded in ``dropped_faces``.
    """

    def __init__(self, vertices, triangles, colors=None, cleanup: bool = True):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (D, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {t.shape}")
        if v.shape[0] < 3:
            raise MeshError("mesh needs at least 3 vertices")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")

        self.dropped_faces = 0
        if cleanup and len(t):
            t, self.dropped_faces = _drop_bad_faces(v, t)
            if self.dropped_faces:
                warnings.warn(
                    f"dropped {self.dropped_faces} degenerate/duplicate faces",
                    stacklevel=2,
                )
        if len(t) == 0:
            raise MeshError("mesh has no valid triangles")

        self.vertices = v
        self.triangles = t
        self.colors = None if colors is None else np.asarray(colors, dtype=np.float64)
        self._edge_graph = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def triangle_normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-300)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        c = self.corners()
        fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # length ~ 2*area
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norm, 1e-300)

    def edge_graph(self) -> sparse.csr_matrix:
        """Symmetric sparse matrix of edge lengths (meters), cached."""
        if self._edge_graph is None:
            t = self.triangles
            i = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
            j = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
            w = np.linalg.norm(self.vertices[i] - self.vertices[j], axis=1)
            g = sparse.coo_matrix((w, (i, j)), shape=(self.n_vertices,) * 2)
            g = g.maximum(g.T).tocsr()  # dedupe, keep symmetric
            self._edge_graph = g
        return self._edge_graph

    def component_labels(self) -> np.ndarray:
        """Per-vertex connected-component label (edge connectivity)."""
        _, labels = csgraph.connected_components(self.edge_graph(), directed=False)
        return labels

    def transformed(self, rotation=None, translation=None, scale: float = 1.0):
        """New mesh with vertices mapped through scale, rotation, translation."""
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.triangles, colors=self.colors, cleanup=False)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """New mesh sharing connectivity but with replaced positions."""
        return TriangleMesh(vertices, self.triangles, colors=self.colors, cleanup=False)


def _drop_bad_faces(v: np.ndarray, t: np.ndarray):
    sorted_t = np.sort(t, axis=1)
    _, first = np.unique(sorted_t, axis=0, return_index=True)
    keep_dup = np.zeros(len(t), dtype=bool)
    keep_dup[first] = True

    c = v[t]
    areas = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    distinct = (sorted_t[:, 0] != sorted_t[:, 1]) & (sorted_t[:, 1] != sorted_t[:, 2])
    keep = keep_dup & (areas > DEGENERATE_AREA) & distinct
    return t[keep], int((~keep).sum())


def surface_area(mesh: TriangleMesh) -> float:
    """Total surface area in m^2 (sum of triangle areas)."""
    return float(mesh.triangle_areas().sum())


# ---------------------------------------------------------------------------
# File I/O


def load_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Load an OBJ or PLY mesh. Format inferred from the extension.

    Degenerate and duplicate faces are dropped with a warning; the count
    is available as ``mesh.dropped_faces``.
    """
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        verts, tris = _read_obj(path)
        colors = None
    elif fmt == "ply":
        verts, tris, colors = _read_ply(path)
    else:
        raise MeshError(f"unsupported mesh format: {fmt!r}")
    if len(verts) == 0 or len(tris) == 0:
        raise MeshError(f"empty mesh in {path}")
    return TriangleMesh(verts, tris, colors=colors)


def save_mesh(mesh: TriangleMesh, path, fmt: str | None = None, binary: bool = True):
    """Write a mesh as OBJ or ASCII/binary little-endian PLY."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "ply":
        _write_ply(mesh, path, binary=binary)
    else:
        raise MeshError(f"unsupported mesh format: {fmt!r}")


def _read_obj(path: Path):
    verts, tris = [], []
    with open(path, "r", errors="replace") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    s = tok.split("/")[0]
                    k = int(s)
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                for a, b in zip(idx[1:-1], idx[2:]):  # fan-triangulate
                    tris.append([idx[0], a, b])
    if not verts:
        raise MeshError(f"no vertices in OBJ file {path}")
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64).reshape(-1, 3)


def _write_obj(mesh: TriangleMesh, path: Path):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: Path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise MeshError(f"{path} is not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype, is_list, count_dtype)])
        while True:
            line = f.readline()
            if not line:
                raise MeshError(f"unexpected EOF in PLY header of {path}")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append((tokens[4], _PLY_TYPES[tokens[3]], True, _PLY_TYPES[tokens[2]]))
                else:
                    elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], False, None))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshError(f"unsupported PLY format {fmt!r} (ascii or little-endian only)")
        binary = fmt == "binary_little_endian"
        data = {}
        for name, count, props in elements:
            data[name] = _read_ply_element(f, count, props, binary)

    if "vertex" not in data or "face" not in data:
        raise MeshError(f"PLY file {path} lacks vertex/face elements")
    vd = data["vertex"]
    verts = np.column_stack([vd["x"], vd["y"], vd["z"]]).astype(np.float64)
    colors = None
    if all(k in vd for k in ("red", "green", "blue")):
        colors = np.column_stack([vd["red"], vd["green"], vd["blue"]]).astype(np.float64) / 255.0
    fd = data["face"]
    key = "vertex_indices" if "vertex_indices" in fd else "vertex_index"
    tris = []
    for poly in fd[key]:
        for a, b in zip(poly[1:-1], poly[2:]):
            tris.append([poly[0], a, b])
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3), colors


def _read_ply_element(f, count, props, binary):
    out = {name: [] for name, _, _, _ in props}
    if binary:
        has_list = any(is_list for _, _, is_list, _ in props)
        if not has_list:
            dt = np.dtype([(name, "<" + d) for name, d, _, _ in props])
            arr = np.frombuffer(f.read(dt.itemsize * count), dtype=dt)
            return {name: arr[name].copy() for name, _, _, _ in props}
        for _ in range(count):
            for name, d, is_list, cd in props:
                if is_list:
                    n = int(np.frombuffer(f.read(np.dtype(cd).itemsize), dtype="<" + cd)[0])
                    vals = np.frombuffer(f.read(np.dtype(d).itemsize * n), dtype="<" + d)
                    out[name].append(vals.astype(np.int64))
                else:
                    out[name].append(np.frombuffer(f.read(np.dtype(d).itemsize), dtype="<" + d)[0])
    else:
        for _ in range(count):
            tokens = f.readline().split()
            pos = 0
            for name, d, is_list, _ in props:
                if is_list:
                    n = int(tokens[pos]); pos += 1
                    out[name].append(np.array(tokens[pos:pos + n], dtype=np.int64)); pos += n
                else:
                    out[name].append(np.dtype(d).type(float(tokens[pos]))); pos += 1
    return {k: (v if v and isinstance(v[0], np.ndarray) else np.array(v)) for k, v in out.items()}


def _write_ply(mesh: TriangleMesh, path: Path, binary: bool):
    has_color = mesh.colors is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {mesh.n_vertices}")
    header += ["property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append(f"element face {mesh.n_triangles}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")

    if has_color:
        rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            v32 = mesh.vertices.astype("<f4")
            for i in range(mesh.n_vertices):
                f.write(v32[i].tobytes())
                if has_color:
                    f.write(rgb[i].tobytes())
            for t in mesh.triangles:
                f.write(struct.pack("<Biii", 3, *t))
        else:
            for i, v in enumerate(mesh.vertices):
                line = f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
                if has_color:
                    line += f" {rgb[i][0]} {rgb[i][1]} {rgb[i][2]}"
                f.write((line + "\n").encode("ascii"))
            for t in mesh.triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))
