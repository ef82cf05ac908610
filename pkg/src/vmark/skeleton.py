"""Skeleton rigs: loading, sparse marker placement along per-bone
cylindrical rays, linear blend skinning, and bounded random poses.

Rigs arrive as JSON files (see ``load_skeleton``); automatic rigging is
out of scope. All operations are pure given inputs and an explicit RNG
seed, so callers control determinism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import SurfacePoint, TriangleMesh
from .raycast import ray_intersect

Z_RANGE = (0.1, 0.9)  # marker rays sample this fraction of bone length
JITTER_STEP = np.deg2rad(5.0)
MAX_RETRIES = 8


class RigError(ValueError):
    """Malformed rig data, bad pose, or rig/mesh mismatch."""


@dataclass
class Skeleton:
    """Joint tree with per-bone cylindrical frames and marker counts.

    joints : name -> rest position (3,)
    bones : ordered (parent, child) joint-name pairs forming a tree
    polar_axes : per-bone reference direction (phi = 0)
    sample_counts : per-bone (n_phi, n_z) marker grid
    joint_limits : optional name -> (3, 2) per-axis angle bounds (radians)
    skin_weights : optional (D, B) matrix, nonnegative rows summing to 1
    """

    joints: dict
    bones: list
    polar_axes: list
    sample_counts: list
    joint_limits: dict | None = None
    skin_weights: np.ndarray | None = None

    def __post_init__(self):
        names = set(self.joints)
        children = [c for _, c in self.bones]
        if len(set(children)) != len(children):
            raise RigError("a joint has more than one parent bone")
        parent_of = {c: p for p, c in self.bones}
        for p, c in self.bones:
            if p not in names or c not in names:
                raise RigError(f"bone ({p}, {c}) references unknown joint")
            seen, cur = {c}, p
            while cur in parent_of:
                cur = parent_of[cur]
                if cur in seen:
                    raise RigError("bone graph contains a cycle")
                seen.add(cur)
        used = set(children) | {p for p, _ in self.bones}
        roots = used - set(children)
        if self.bones and len(roots) != 1:
            raise RigError(f"bone graph must have exactly one root, found {sorted(roots)}")
        if len({len(self.bones), len(self.polar_axes), len(self.sample_counts)}) != 1:
            raise RigError("bones, polar_axes and sample_counts lengths differ")
        if self.joint_limits is not None:
            for name, lim in self.joint_limits.items():
                lim = np.asarray(lim, dtype=np.float64)
                if lim.shape != (3, 2) or np.any(lim[:, 0] > lim[:, 1]):
                    raise RigError(f"bad angle limits for joint {name!r}")
        if self.skin_weights is not None:
            w = np.asarray(self.skin_weights, dtype=np.float64)
            if w.ndim != 2 or w.shape[1] != len(self.bones):
                raise RigError("skin weight matrix must be (D, n_bones)")
            if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
                raise RigError("skin weights must be nonnegative with rows summing to 1")
            self.skin_weights = w

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def marker_count(self) -> int:
        """Total markers S over all per-bone grids."""
        return int(sum(int(p) * int(z) for p, z in self.sample_counts))

    def bone_frame(self, i: int):
        """(origin, x_hat, y_hat, z_hat, length) of bone i's cylinder frame.

        Origin is the parent-joint endpoint; z_hat runs along the bone;
        x_hat is the polar axis projected perpendicular to the bone.
        """
        p, c = self.bones[i]
        a, b = self.joints[p], self.joints[c]
        axis = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
        length = float(np.linalg.norm(axis))
        if length < 1e-12:
            raise RigError(f"bone ({p}, {c}) has zero length")
        z_hat = axis / length
        polar = np.asarray(self.polar_axes[i], dtype=np.float64)
        x_hat = polar - (polar @ z_hat) * z_hat
        nx = np.linalg.norm(x_hat)
        if nx < 1e-9:
            raise RigError(f"polar axis of bone ({p}, {c}) is parallel to the bone")
        x_hat = x_hat / nx
        return np.asarray(a, dtype=np.float64), x_hat, np.cross(z_hat, x_hat), z_hat, length

    def bone_index(self, child_name: str) -> int:
        for i, (_, c) in enumerate(self.bones):
            if c == child_name:
                return i
        raise RigError(f"no bone with child joint {child_name!r}")


@dataclass
class Pose:
    """Per-bone rigid transforms (x -> R x + t) relative to rest pose."""

    rotations: np.ndarray  # (B, 3, 3)
    translations: np.ndarray  # (B, 3)

    def __post_init__(self):
        r = np.asarray(self.rotations, dtype=np.float64)
        t = np.asarray(self.translations, dtype=np.float64)
        if r.ndim != 3 or r.shape[1:] != (3, 3) or t.shape != (r.shape[0], 3):
            raise RigError("pose needs (B, 3, 3) rotations and (B, 3) translations")
        eye = np.eye(3)
        for i, rot in enumerate(r):
            if np.max(np.abs(rot @ rot.T - eye)) > 1e-9 or np.linalg.det(rot) < 0:
                raise RigError(f"pose rotation {i} is not a proper rotation")
        self.rotations, self.translations = r, t

    @classmethod
    def identity(cls, n_bones: int) -> "Pose":
        return cls(np.tile(np.eye(3), (n_bones, 1, 1)), np.zeros((n_bones, 3)))

    def composed_with_global(self, rotation, translation) -> "Pose":
        """Pose that first applies self, then the global rigid motion."""
        rot = np.asarray(rotation, dtype=np.float64)
        tr = np.asarray(translation, dtype=np.float64)
        return Pose(rot @ self.rotations, self.translations @ rot.T + tr)


@dataclass
class SparseMarkerSet:
    """S surface points with (bone, phi, z) placement provenance."""

    points: list  # of SurfacePoint
    bone_ids: np.ndarray  # (S,)
    phis: np.ndarray  # (S,) radians
    zs: np.ndarray  # (S,) fraction of bone length
    failures: list = field(default_factory=list)  # (bone_id, phi, z) never hit

    def __post_init__(self):
        if len(self.points) < 1:
            raise RigError("marker set is empty")

    @property
    def count(self) -> int:
        return len(self.points)

    def positions(self, mesh: TriangleMesh) -> np.ndarray:
        return np.array([p.position(mesh) for p in self.points])

    def snapped_vertices(self, mesh: TriangleMesh) -> np.ndarray:
        """Per-marker nearest triangle vertex (distance-field sources)."""
        return np.array([p.nearest_vertex(mesh) for p in self.points], dtype=np.int64)


# ---------------------------------------------------------------------------
# Rig file I/O


def load_skeleton(path) -> Skeleton:
    """Read a rig JSON file.

    Schema (see the repo README for a commented example)::

        {
          "format": "vmark-rig", "version": 1,
          "joints": {"name": [x, y, z], ...},
          "bones": [{"parent": "a", "child": "b",
                     "polar_axis": [x, y, z],
                     "samples": [n_phi, n_z]}, ...],
          "joint_limits": {"name": [[lo, hi], [lo, hi], [lo, hi]], ...},
          "skin_weights": [[w, ...], ...]          # optional, (D, B)
        }

    ``samples`` may also be a single integer, meaning (n, 1).
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RigError(f"cannot read rig file {path}: {exc}") from exc
    if data.get("format") != "vmark-rig":
        raise RigError(f"{path} is not a vmark rig file")
    joints = {k: np.asarray(v, dtype=np.float64) for k, v in data["joints"].items()}
    bones, axes, counts = [], [], []
    for b in data["bones"]:
        bones.append((b["parent"], b["child"]))
        axes.append(np.asarray(b["polar_axis"], dtype=np.float64))
        s = b.get("samples", 1)
        counts.append((int(s), 1) if np.isscalar(s) else (int(s[0]), int(s[1])))
    limits = data.get("joint_limits")
    if limits is not None:
        limits = {k: np.asarray(v, dtype=np.float64) for k, v in limits.items()}
    weights = data.get("skin_weights")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    return Skeleton(joints, bones, axes, counts, joint_limits=limits, skin_weights=weights)


def save_skeleton(skeleton: Skeleton, path):
    data = {
        "format": "vmark-rig",
        "version": 1,
        "joints": {k: list(map(float, v)) for k, v in skeleton.joints.items()},
        "bones": [
            {
                "parent": p,
                "child": c,
                "polar_axis": list(map(float, skeleton.polar_axes[i])),
                "samples": [int(n) for n in skeleton.sample_counts[i]],
            }
            for i, (p, c) in enumerate(skeleton.bones)
        ],
    }
    if skeleton.joint_limits is not None:
        data["joint_limits"] = {k: np.asarray(v).tolist() for k, v in skeleton.joint_limits.items()}
    if skeleton.skin_weights is not None:
        data["skin_weights"] = skeleton.skin_weights.tolist()
    Path(path).write_text(json.dumps(data, indent=1))


# ---------------------------------------------------------------------------
# Marker placement


def place_sparse_markers(mesh: TriangleMesh, skeleton: Skeleton, seed: int = 0) -> SparseMarkerSet:
    """Place sparse markers by casting perpendicular rays from each bone.

    For bone i with grid (n_phi, n_z): phi is uniform over [0, 2pi)
    starting at the polar axis, z is uniform over the middle of the bone
    (fractions 0.1 to 0.9). Each marker is the nearest mesh intersection
    of the ray leaving the bone axis at (phi, z). Missed rays are
    retried up to 8 times with phi jittered within +-5 degrees (seeded),
    then recorded as placement failures. A bone whose rays all miss is a
    rig/mesh mismatch and raises RigError.
    """
    rng = np.random.default_rng(seed)
    points, bone_ids, phis, zs, failures = [], [], [], [], []
    for i in range(skeleton.n_bones):
        origin, x_hat, y_hat, z_hat, length = skeleton.bone_frame(i)
        n_phi, n_z = skeleton.sample_counts[i]
        bone_hits = 0
        for j in range(n_z):
            z_frac = Z_RANGE[0] + (Z_RANGE[1] - Z_RANGE[0]) * (j + 0.5) / n_z
            start = origin + z_frac * length * z_hat
            for a in range(n_phi):
                phi = 2.0 * np.pi * a / n_phi
                hit = None
                for attempt in range(MAX_RETRIES + 1):
                    jitter = 0.0 if attempt == 0 else rng.uniform(-JITTER_STEP, JITTER_STEP)
                    ang = phi + jitter
                    direction = np.cos(ang) * x_hat + np.sin(ang) * y_hat
                    hit = ray_intersect(mesh, start, direction)
                    if hit is not None:
                        break
                if hit is None:
                    failures.append((i, phi, z_frac))
                    continue
                points.append(hit[0])
                bone_ids.append(i)
                phis.append(phi)
                zs.append(z_frac)
                bone_hits += 1
        if bone_hits == 0:
            raise RigError(
                f"all marker rays of bone {skeleton.bones[i]} missed the mesh "
                "(rig/mesh mismatch?)"
            )
    return SparseMarkerSet(
        points,
        np.array(bone_ids, dtype=np.int64),
        np.array(phis),
        np.array(zs),
        failures=failures,
    )


def save_markers(markers: SparseMarkerSet, path):
    data = {
        "format": "vmark-markers",
        "version": 1,
        "markers": [
            {
                "triangle": int(p.triangle_id),
                "barycentric": list(map(float, p.barycentric)),
                "bone": int(markers.bone_ids[i]),
                "phi": float(markers.phis[i]),
                "z": float(markers.zs[i]),
            }
            for i, p in enumerate(markers.points)
        ],
    }
    Path(path).write_text(json.dumps(data, indent=1))


def load_markers(path) -> SparseMarkerSet:
    data = json.loads(Path(path).read_text())
    if data.get("format") != "vmark-markers":
        raise RigError(f"{path} is not a vmark marker file")
    rows = data["markers"]
    return SparseMarkerSet(
        [SurfacePoint(r["triangle"], np.asarray(r["barycentric"])) for r in rows],
        np.array([r["bone"] for r in rows], dtype=np.int64),
        np.array([r["phi"] for r in rows], dtype=np.float64),
        np.array([r["z"] for r in rows], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Skinning


def lbs_skin(mesh: TriangleMesh, skeleton: Skeleton, pose: Pose,
             weights: np.ndarray | None = None) -> TriangleMesh:
    """Linear blend skinning: v' = sum_b w(v, b) * (R_b v + t_b).

    Weights come from the rig file when present, else must be passed
    explicitly (see ``compute_skinning_weights``). Connectivity and any
    per-vertex attributes are carried over unchanged.
    """
    w = weights if weights is not None else skeleton.skin_weights
    if w is None:
        raise RigError("no skinning weights: rig has none and none were passed")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (mesh.n_vertices, skeleton.n_bones):
        raise RigError(f"weights shape {w.shape} != (D={mesh.n_vertices}, B={skeleton.n_bones})")
    if pose.rotations.shape[0] != skeleton.n_bones:
        raise RigError("pose bone count does not match skeleton")

    # (B, D, 3): each bone's rigid image of every vertex
    moved = np.einsum("bij,dj->bdi", pose.rotations, mesh.vertices) + pose.translations[:, None, :]
    skinned = np.einsum("db,bdi->di", w, moved)
    return mesh.with_vertices(skinned)


def compute_skinning_weights(mesh: TriangleMesh, skeleton: Skeleton,
                             c: float = 1.0) -> np.ndarray:
    """Heat-diffusion skinning weights with bones as heat sources.

    Reuses the soft-label equilibrium solver, replacing marker
    indicators with nearest-bone indicators and geodesic distances with
    Euclidean point-to-segment distances. Rows are nonnegative and sum
    to 1 within 1e-6.
    """
    from . import softlabel  # local import; softlabel depends on this module

    dist = np.stack(
        [_segment_distances(mesh.vertices, *_bone_segment(skeleton, i))
         for i in range(skeleton.n_bones)]
    )  # (B, D)
    w = softlabel.solve_equilibrium_fields(mesh, dist, c=c)  # (B, D)
    return np.clip(w.T, 0.0, None)


def _bone_segment(skeleton: Skeleton, i: int):
    p, c = skeleton.bones[i]
    return np.asarray(skeleton.joints[p], dtype=np.float64), np.asarray(skeleton.joints[c], dtype=np.float64)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


# ---------------------------------------------------------------------------
# Poses


def pose_from_joint_rotations(skeleton: Skeleton, rotations: dict,
                              root_translation=None) -> Pose:
    """Forward kinematics: per-joint local rotations to per-bone transforms.

    Each joint's rotation acts about its rest position and is composed
    down the tree; the bone (p, c) rigidly follows joint p's accumulated
    frame. Joints absent from `rotations` stay at identity.
    """
    parent_of = {c: p for p, c in skeleton.bones}
    accumulated: dict = {}

    def accum(joint: str):
        if joint in accumulated:
            return accumulated[joint]
        local_r = np.asarray(rotations.get(joint, np.eye(3)), dtype=np.float64)
        r_j = np.asarray(skeleton.joints[joint], dtype=np.float64)
        rot, tr = local_r, r_j - local_r @ r_j  # rotate about rest joint
        if joint in parent_of:
            pr, pt = accum(parent_of[joint])
            rot, tr = pr @ rot, pr @ tr + pt
        elif root_translation is not None:
            tr = tr + np.asarray(root_translation, dtype=np.float64)
        accumulated[joint] = (rot, tr)
        return accumulated[joint]

    rots = np.empty((skeleton.n_bones, 3, 3))
    trans = np.empty((skeleton.n_bones, 3))
    for i, (p, _) in enumerate(skeleton.bones):
        rots[i], trans[i] = accum(p)
    return Pose(rots, trans)


def sample_random_pose(skeleton: Skeleton, seed) -> Pose:
    """Uniform random pose within the rig's per-joint angle limit boxes.

    Angles are drawn per axis and composed as extrinsic x-y-z rotations.
    `seed` may be an int or a ``numpy.random.Generator``. Raises when
    the rig carries no joint limits.
    """
    if skeleton.joint_limits is None:
        raise RigError("rig has no joint limits; random pose sampling needs them")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rotations = {}
    for name in skeleton.joints:
        lim = np.asarray(skeleton.joint_limits.get(name, np.zeros((3, 2))), dtype=np.float64)
        angles = rng.uniform(lim[:, 0], lim[:, 1])
        rotations[name] = Rotation.from_euler("xyz", angles).as_matrix()
    return pose_from_joint_rotations(skeleton, rotations)


def save_pose(pose: Pose, path, joint_rotations: dict | None = None):
    """Write a pose JSON file; per-joint quaternions when available."""
    if joint_rotations is not None:
        data = {
            "format": "vmark-pose",
            "version": 1,
            "joints": {
                k: Rotation.from_matrix(np.asarray(v)).as_quat(scalar_first=True).tolist()
                for k, v in joint_rotations.items()
            },
        }
    else:
        data = {
            "format": "vmark-pose",
            "version": 1,
            "bones": [
                {"rotation": pose.rotations[i].tolist(),
                 "translation": pose.translations[i].tolist()}
                for i in range(len(pose.rotations))
            ],
        }
    Path(path).write_text(json.dumps(data, indent=1))


def load_pose(path, skeleton: Skeleton) -> Pose:
    """Read a pose JSON file (per-joint quaternions or per-bone transforms)."""
    data = json.loads(Path(path).read_text())
    if data.get("format") != "vmark-pose":
        raise RigError(f"{path} is not a vmark pose file")
    if "joints" in data:
        rotations = {
            k: Rotation.from_quat(q, scalar_first=True).as_matrix()
            for k, q in data["joints"].items()
        }
        return pose_from_joint_rotations(skeleton, rotations,
                                         root_translation=data.get("root_translation"))
    rows = data["bones"]
    if len(rows) != skeleton.n_bones:
        raise RigError("pose bone count does not match skeleton")
    return Pose(
        np.array([r["rotation"] for r in rows], dtype=np.float64),
        np.array([r["translation"] for r in rows], dtype=np.float64),
    )


def load_motion_clip(path, skeleton: Skeleton) -> list:
    """Read a keyframe motion clip and replay it verbatim as Poses.

    Format (plain text)::

        vmark-motion 1
        joints name1 name2 ...
        <time> <w x y z> <w x y z> ...   # one quaternion per listed joint

    Returns the list of per-keyframe Poses in file order.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()
             if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("vmark-motion"):
        raise RigError(f"{path} is not a vmark motion clip")
    header = lines[1].split()
    if header[0] != "joints":
        raise RigError("motion clip missing 'joints' header line")
    names = header[1:]
    for n in names:
        if n not in skeleton.joints:
            raise RigError(f"motion clip joint {n!r} not in skeleton")
    poses = []
    for ln in lines[2:]:
        vals = [float(x) for x in ln.split()]
        if len(vals) != 1 + 4 * len(names):
            raise RigError("motion clip row has wrong number of fields")
        rotations = {}
        for k, name in enumerate(names):
            q = vals[1 + 4 * k: 5 + 4 * k]
            rotations[name] = Rotation.from_quat(q, scalar_first=True).as_matrix()
        poses.append(pose_from_joint_rotations(skeleton, rotations))
    return poses
