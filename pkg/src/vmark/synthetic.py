"""Procedural test and demo shapes: icosphere, cylinder, edge-chain strip,
and a rigged low-poly humanoid extracted from a capsule implicit surface.

Everything here is deterministic; the humanoid doubles as the stand-in
template for end-to-end runs where real scanned assets are out of reach.
"""

from __future__ import annotations

import numpy as np
from skimage import measure

from .mesh import TriangleMesh
from .skeleton import Skeleton


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron subdivided `subdivisions` times, projected to a sphere.

    Vertex count is 10 * 4**n + 2 (642 at n=3); face count 20 * 4**n.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True) * radius
    return TriangleMesh(verts, faces, cleanup=False)


def _subdivide(verts, faces):
    edge_mid = {}
    verts = list(verts)

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in edge_mid:
            edge_mid[key] = len(verts)
            verts.append((np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0)
        return edge_mid[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts, dtype=np.float64), np.array(out, dtype=np.int64)


def cylinder(radius: float = 0.5, height: float = 2.0, segments: int = 32,
             rings: int = 8, capped: bool = True) -> TriangleMesh:
    """Cylinder along +z from z=0 to z=height, centered on the z axis."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    verts, faces = [], []
    for r in range(rings + 1):
        z = height * r / rings
        verts += [[x, y, z] for x, y in ring]
    for r in range(rings):
        base = r * segments
        for s in range(segments):
            a, b = base + s, base + (s + 1) % segments
            c, d = a + segments, b + segments
            faces += [[a, b, d], [a, d, c]]
    if capped:
        bottom, top = len(verts), len(verts) + 1
        verts += [[0, 0, 0], [0, 0, height]]
        last = rings * segments
        for s in range(segments):
            faces.append([bottom, (s + 1) % segments, s])
            faces.append([top, last + s, last + (s + 1) % segments])
    return TriangleMesh(np.array(verts), np.array(faces), cleanup=False)


def chain_strip(n_edges: int = 10, flap: float = 0.01) -> TriangleMesh:
    """Strip whose spine is a straight chain of unit edges along +x.

    Vertices 0..n are the spine at (i, 0, 0); each segment carries one
    flap vertex near its midpoint, so spine graph distances equal hop
    counts and the diameter equals ``n_edges`` exactly.
    """
    spine = [[i, 0.0, 0.0] for i in range(n_edges + 1)]
    flaps = [[i + 0.5, flap, 0.0] for i in range(n_edges)]
    verts = np.array(spine + flaps)
    faces = np.array([[i, i + 1, n_edges + 1 + i] for i in range(n_edges)])
    return TriangleMesh(verts, faces, cleanup=False)


def unit_square(z: float = 0.0) -> TriangleMesh:
    """Two triangles covering [-0.5, 0.5]^2 at the given z."""
    v = np.array([[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), cleanup=False)


# ---------------------------------------------------------------------------
# Rigged humanoid from a capsule implicit surface

_BIPED_JOINTS = {
    "hip": (0.0, 0.0, 0.95),
    "spine": (0.0, 0.0, 1.18),
    "chest": (0.0, 0.0, 1.40),
    "neck": (0.0, 0.0, 1.52),
    "head": (0.0, 0.0, 1.76),
    "shoulder_l": (0.20, 0.0, 1.44),
    "elbow_l": (0.47, 0.0, 1.44),
    "wrist_l": (0.74, 0.0, 1.44),
    "shoulder_r": (-0.20, 0.0, 1.44),
    "elbow_r": (-0.47, 0.0, 1.44),
    "wrist_r": (-0.74, 0.0, 1.44),
    "hip_l": (0.10, 0.0, 0.90),
    "knee_l": (0.13, 0.0, 0.50),
    "ankle_l": (0.15, 0.0, 0.08),
    "hip_r": (-0.10, 0.0, 0.90),
    "knee_r": (-0.13, 0.0, 0.50),
    "ankle_r": (-0.15, 0.0, 0.08),
}

# bone: (parent, child, polar axis, (n_phi, n_z), capsule radius)
_BIPED_BONES = [
    ("hip", "spine", (0, 1, 0), (2, 1), 0.130),
    ("spine", "chest", (0, 1, 0), (2, 1), 0.125),
    ("chest", "neck", (0, 1, 0), (2, 1), 0.090),
    ("neck", "head", (0, 1, 0), (2, 2), 0.095),
    ("chest", "shoulder_l", (0, 0, 1), (1, 1), 0.060),
    ("shoulder_l", "elbow_l", (0, 0, 1), (2, 1), 0.050),
    ("elbow_l", "wrist_l", (0, 0, 1), (2, 1), 0.042),
    ("chest", "shoulder_r", (0, 0, 1), (1, 1), 0.060),
    ("shoulder_r", "elbow_r", (0, 0, 1), (2, 1), 0.050),
    ("elbow_r", "wrist_r", (0, 0, 1), (2, 1), 0.042),
    ("hip", "hip_l", (0, 1, 0), (1, 1), 0.080),
    ("hip_l", "knee_l", (0, 1, 0), (2, 1), 0.072),
    ("knee_l", "ankle_l", (0, 1, 0), (2, 1), 0.058),
    ("hip", "hip_r", (0, 1, 0), (1, 1), 0.080),
    ("hip_r", "knee_r", (0, 1, 0), (2, 1), 0.072),
    ("knee_r", "ankle_r", (0, 1, 0), (2, 1), 0.058),
]

# modest ranges keep random poses free of gross self-intersection
_BIPED_LIMITS = {
    "hip": [[0.0, 0.0]] * 3,
    "spine": [[-0.25, 0.25]] * 3,
    "chest": [[-0.20, 0.20]] * 3,
    "neck": [[-0.30, 0.30]] * 3,
    "head": [[0.0, 0.0]] * 3,
    "shoulder_l": [[-0.45, 0.45]] * 3,
    "elbow_l": [[-0.10, 0.10], [-0.10, 0.10], [0.0, 0.9]],
    "wrist_l": [[0.0, 0.0]] * 3,
    "shoulder_r": [[-0.45, 0.45]] * 3,
    "elbow_r": [[-0.10, 0.10], [-0.10, 0.10], [-0.9, 0.0]],
    "wrist_r": [[0.0, 0.0]] * 3,
    "hip_l": [[-0.40, 0.40], [-0.25, 0.25], [-0.20, 0.20]],
    "knee_l": [[-0.9, 0.0], [0.0, 0.0], [0.0, 0.0]],
    "ankle_l": [[0.0, 0.0]] * 3,
    "hip_r": [[-0.40, 0.40], [-0.25, 0.25], [-0.20, 0.20]],
    "knee_r": [[-0.9, 0.0], [0.0, 0.0], [0.0, 0.0]],
    "ankle_r": [[0.0, 0.0]] * 3,
}


def _capsule_sdf(points, a, b, radius):
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1) - radius


def biped(pitch: float = 0.022):
    """Rigged humanoid: (TriangleMesh, Skeleton) in rest (T) pose.

    The surface is the zero level set of a smooth union of per-bone
    capsules, extracted by marching cubes at the given voxel pitch
    (0.022 m yields roughly 5k vertices). The skeleton carries marker
    sample counts (30 total), joint limits, and polar axes.
    """
    joints = {k: np.array(v) for k, v in _BIPED_JOINTS.items()}
    lo = np.min(list(joints.values()), axis=0) - 0.25
    hi = np.max(list(joints.values()), axis=0) + 0.25
    nx, ny, nz = [int(np.ceil((hi[i] - lo[i]) / pitch)) + 1 for i in range(3)]
    gx, gy, gz = [np.linspace(lo[i], hi[i], (nx, ny, nz)[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(gx, gy, gz, indexing="ij"), axis=-1).reshape(-1, 3)

    k = 0.04  # smooth-union blending radius
    acc = np.full(len(pts), 1e3)  # far outside everything
    for parent, child, _, _, radius in _BIPED_BONES:
        d = _capsule_sdf(pts, joints[parent], joints[child], radius)
        h = np.clip(0.5 + 0.5 * (acc - d) / k, 0.0, 1.0)
        acc = acc * (1 - h) + d * h - k * h * (1 - h)
    sdf = acc.reshape(nx, ny, nz)

    verts, faces, _, _ = measure.marching_cubes(sdf, level=0.0, spacing=(
        gx[1] - gx[0], gy[1] - gy[0], gz[1] - gz[0]))
    verts = verts + lo
    mesh = TriangleMesh(verts, faces.astype(np.int64))
    skeleton = biped_skeleton()
    return mesh, skeleton


def biped_skeleton() -> Skeleton:
    """The humanoid rig alone (joints, bones, counts, limits)."""
    return Skeleton(
        joints={k: np.array(v, dtype=np.float64) for k, v in _BIPED_JOINTS.items()},
        bones=[(p, c) for p, c, _, _, _ in _BIPED_BONES],
        polar_axes=[np.array(ax, dtype=np.float64) for _, _, ax, _, _ in _BIPED_BONES],
        sample_counts=[grid for _, _, _, grid, _ in _BIPED_BONES],
        joint_limits={k: np.array(v, dtype=np.float64) for k, v in _BIPED_LIMITS.items()},
    )
