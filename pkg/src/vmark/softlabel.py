"""Dense soft labels from sparse markers via heat equilibrium.

For every marker s the per-vertex weight field w_s solves the sparse
SPD system (L + H) w_s = H p_s, where L is the clamped cotangent
stiffness matrix, p_s indicates vertices whose geodesically nearest
marker is s (ties split 1/k), and H is diagonal with entries k*c/d^2
built from the nearest-marker distance d. Stacking the S fields row-wise
gives the label matrix; its columns sum to 1 analytically (the indicator
columns partition unity and L annihilates constants), so no explicit
renormalization is applied.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg, splu

from .geodesics import vertex_distances
from .laplacian import cotangent_laplacian
from .mesh import TriangleMesh, save_mesh
from .skeleton import SparseMarkerSet

DISTANCE_FLOOR = 1e-4  # m, caps H where a vertex coincides with a marker
TIE_TOLERANCE = 1e-9  # m, equidistant-marker detection
DEFAULT_TOL = 1e-8

MAGIC = b"VMRK"
VERSION = 1


class SolveError(RuntimeError):
    """Linear solve failed or exceeded the residual tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


@dataclass
class HeatSystem:
    """Diagonal heat coefficients plus nearest-marker indicators.

    h_diag : (D,) positive per-vertex coefficients (1/m^2)
    indicators : (S, D) sparse, column sums exactly 1 (ties split 1/k)
    nearest_marker : (D,) index of (a) nearest marker per vertex
    nearest_distance : (D,) geodesic distance to it (meters, unfloored)
    """

    h_diag: np.ndarray
    indicators: sparse.csr_matrix
    nearest_marker: np.ndarray
    nearest_distance: np.ndarray


@dataclass
class SoftLabelField:
    """(S, D) matrix of per-point marker affinities; columns sum to 1."""

    labels: np.ndarray
    markers: SparseMarkerSet | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim != 2:
            raise ValueError("label matrix must be (S, D)")

    @property
    def n_markers(self) -> int:
        return self.labels.shape[0]

    @property
    def n_points(self) -> int:
        return self.labels.shape[1]

    def clamped(self) -> np.ndarray:
        """Labels clamped to [0, 1] for export."""
        return np.clip(self.labels, 0.0, 1.0)

    def hard(self) -> np.ndarray:
        """One-hot argmax of each column."""
        out = np.zeros_like(self.labels)
        out[np.argmax(self.labels, axis=0), np.arange(self.n_points)] = 1.0
        return out


def _system_from_distances(dist: np.ndarray, c: float) -> HeatSystem:
    """Tie-splitting indicator/heat construction from a (S, D) distance matrix."""
    if np.isinf(dist).all(axis=0).any():
        bad = int(np.isinf(dist).all(axis=0).sum())
        raise SolveError(f"{bad} vertices unreachable from every marker")
    d_min = dist.min(axis=0)
    ties = dist <= d_min[None, :] + TIE_TOLERANCE  # (S, D) bool
    k = ties.sum(axis=0)
    floored = np.maximum(d_min, DISTANCE_FLOOR)
    h_diag = k * c / floored**2
    indicators = sparse.csr_matrix(ties / k[None, :].astype(np.float64))
    return HeatSystem(
        h_diag=h_diag,
        indicators=indicators,
        nearest_marker=np.argmin(dist, axis=0),
        nearest_distance=d_min,
    )


def build_heat_system(mesh: TriangleMesh, markers: SparseMarkerSet, c: float = 1.0) -> HeatSystem:
    """Geodesic nearest-marker indicators and heat coefficients.

    Markers are snapped to their nearest triangle vertex for the
    distance fields. Distances below 1e-4 m are floored so H stays
    finite when a vertex hosts a marker; markers equidistant within
    1e-9 m share a vertex's indicator mass 1/k with H scaled by k.
    """
    if c <= 0:
        raise ValueError("heat constant c must be positive")
    dist = vertex_distances(mesh, markers.snapped_vertices(mesh))
    return _system_from_distances(dist, c)


class HeatEquilibriumSolver:
    """Shared-factorization solver for (L + H) w = H p across many p.

    The system matrix is identical for all markers, so one sparse LU
    factorization (or, with method="cg", one matrix) serves all S
    right-hand sides. Instances are immutable after construction and
    safe for concurrent solves.
    """

    def __init__(self, laplacian: sparse.spmatrix, h_diag: np.ndarray,
                 method: str = "direct", tol: float = DEFAULT_TOL, maxiter: int | None = None):
        if np.any(h_diag <= 0):
            raise SolveError("heat coefficients must be positive for SPD systems")
        self.matrix = (laplacian + sparse.diags(h_diag)).tocsc()
        self.h_diag = np.asarray(h_diag, dtype=np.float64)
        self.method = method
        self.tol = tol
        self.maxiter = maxiter if maxiter is not None else 20 * self.matrix.shape[0]
        self._lu = splu(self.matrix) if method == "direct" else None
        if method not in ("direct", "cg"):
            raise ValueError(f"unknown solver method {method!r}")

    def solve(self, indicator: np.ndarray) -> np.ndarray:
        """Solve for one marker's weight field given its indicator p."""
        rhs = self.h_diag * np.asarray(indicator, dtype=np.float64).ravel()
        rhs_norm = float(np.linalg.norm(rhs))
        if self.method == "direct":
            w = self._lu.solve(rhs)
        else:
            w, _ = cg(self.matrix, rhs, rtol=self.tol * 1e-2, atol=0.0, maxiter=self.maxiter)
        residual = float(np.linalg.norm(self.matrix @ w - rhs))
        if rhs_norm > 0 and residual > self.tol * rhs_norm:
            raise SolveError(
                f"heat solve residual {residual:.3e} above {self.tol:.1e} * |rhs|",
                residual=residual,
            )
        return w


def solve_heat_equilibrium(laplacian: sparse.spmatrix, system: HeatSystem, s: int,
                           tol: float = DEFAULT_TOL, method: str = "direct") -> np.ndarray:
    """One marker's per-vertex weight field w_s.

    Verifies the relative residual |(L+H) w - H p| <= tol * |H p| and
    raises SolveError (carrying the achieved residual) otherwise.
    """
    solver = HeatEquilibriumSolver(laplacian, system.h_diag, method=method, tol=tol)
    return solver.solve(system.indicators.getrow(s).toarray())


def solve_equilibrium_fields(mesh: TriangleMesh, distances: np.ndarray, c: float = 1.0,
                             tol: float = DEFAULT_TOL, method: str = "direct",
                             clamp_negative: bool = True) -> np.ndarray:
    """Equilibrium fields for arbitrary per-source distance rows.

    Shared by marker densification (geodesic distances) and heat
    skinning weights (Euclidean bone distances). Returns (K, D) fields
    whose columns sum to 1 up to solver tolerance.
    """
    system = _system_from_distances(np.asarray(distances, dtype=np.float64), c)
    lap = cotangent_laplacian(mesh, clamp_negative=clamp_negative)
    solver = HeatEquilibriumSolver(lap, system.h_diag, method=method, tol=tol)
    p = system.indicators.toarray()
    return np.stack([solver.solve(p[s]) for s in range(p.shape[0])])


def densify(mesh: TriangleMesh, markers: SparseMarkerSet, c: float = 1.0,
            tol: float = DEFAULT_TOL, method: str = "direct",
            clamp_negative: bool = True) -> SoftLabelField:
    """Densify sparse markers into a per-vertex soft-label field.

    One heat system is built, the factorization is shared across the S
    right-hand sides, and the stacked solutions form the (S, D) label
    matrix. Column sums equal 1 up to solver tolerance without explicit
    renormalization.
    """
    system = build_heat_system(mesh, markers, c=c)
    lap = cotangent_laplacian(mesh, clamp_negative=clamp_negative)
    solver = HeatEquilibriumSolver(lap, system.h_diag, method=method, tol=tol)
    p = system.indicators.toarray()
    labels = np.stack([solver.solve(p[s]) for s in range(markers.count)])
    return SoftLabelField(labels, markers=markers)


# ---------------------------------------------------------------------------
# Label file I/O ("VMRK" binary)


def write_labels(path, labels: np.ndarray):
    """Write an (S, D) label matrix: magic "VMRK", u32 version, u32 S,
    u32 D, then S*D little-endian f32 in marker-major order."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label matrix must be 2-D")
    s, d = labels.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, s, d))
        f.write(np.ascontiguousarray(labels, dtype="<f4").tobytes())


def read_labels(path) -> np.ndarray:
    """Read a "VMRK" label file back as a float32 (S, D) matrix."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a VMRK label file")
    version, s, d = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise ValueError(f"unsupported VMRK version {version}")
    data = np.frombuffer(raw[16:16 + 4 * s * d], dtype="<f4")
    if data.size != s * d:
        raise ValueError("VMRK payload truncated")
    return data.reshape(s, d).copy()


def write_marker_sidecar(path, markers: SparseMarkerSet, skeleton=None):
    """ASCII provenance sidecar: one `marker bone phi z` row per marker."""
    lines = ["# marker bone phi_rad z_frac"]
    for i in range(markers.count):
        bone = int(markers.bone_ids[i])
        name = skeleton.bones[bone][1] if skeleton is not None else str(bone)
        lines.append(f"{i} {name} {markers.phis[i]:.6f} {markers.zs[i]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def marker_colormap(n: int) -> np.ndarray:
    """n visually distinct RGB colors (golden-angle hue walk)."""
    hues = (np.arange(n) * 0.61803398875) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.85, 0.95) for h in hues])


def export_labels(field: SoftLabelField, path, mode: str = "soft",
                  mesh: TriangleMesh | None = None):
    """Export a label field.

    mode="soft"     VMRK binary of the clamped soft labels.
    mode="hard"     VMRK binary of one-hot argmax labels.
    mode="colormap" PLY with per-vertex colors blending one fixed color
                    per marker by its weight (requires `mesh`).
    """
    if mode == "soft":
        write_labels(path, field.clamped())
    elif mode == "hard":
        write_labels(path, field.hard())
    elif mode == "colormap":
        if mesh is None:
            raise ValueError("colormap export needs the mesh")
        colors = np.clip(field.clamped().T @ marker_colormap(field.n_markers), 0.0, 1.0)
        save_mesh(TriangleMesh(mesh.vertices, mesh.triangles, colors=colors, cleanup=False), path)
    else:
        raise ValueError(f"unknown export mode {mode!r}")
