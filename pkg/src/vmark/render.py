"""Pinhole depth rendering and back-projection.

Depth maps follow the consumer depth-camera convention: the stored
value is the optical-axis depth z in meters (0 = no hit), exported as
16-bit millimeter PNGs. Synthetic frames additionally record, per hit
pixel, the source triangle and perspective-correct barycentric
coordinates so labels can be carried from mesh annotations to pixels.

Cameras use the computer-vision frame: x right, y down, z forward;
pixel (row i, col j) integrates over [j, j+1) x [i, i+1) and its ray
passes through (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .mesh import TriangleMesh

_NEAR = 1e-6  # triangles with any vertex closer than this are culled
_CHUNK = 4_000_000  # max candidate pixels processed at once


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus camera-from-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3), world -> camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        r = np.asarray(self.rotation, dtype=np.float64)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("extrinsic rotation is not orthonormal")
        self.rotation = r
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return points_world @ self.rotation.T + self.translation

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (points_cam - self.translation) @ self.rotation

    def project(self, points_world: np.ndarray):
        """Continuous pixel coordinates (u, v) and camera-space depth z."""
        pc = self.to_camera(np.atleast_2d(points_world))
        z = pc[:, 2]
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        return np.column_stack([u, v]), z

    def pixel_rays(self) -> np.ndarray:
        """(h, w, 3) camera-space ray directions with unit z component."""
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        x = (j + 0.5 - self.cx) / self.fx
        y = (i + 0.5 - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0), width: int = 320, height: int = 288,
            fx: float | None = None, fy: float | None = None) -> Camera:
    """Camera at `eye` looking toward `target` with the given world up."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(z, upv)
    if np.linalg.norm(x) < 1e-9:  # looking along up: pick any perpendicular
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    fx = 0.65 * width if fx is None else fx
    fy = fx if fy is None else fy
    return Camera(fx, fy, width / 2.0, height / 2.0, width, height,
                  rot, -rot @ eye)


def sample_viewpoints(n: int, strategy: str = "ring", radius: float = 2.5,
                      center=(0.0, 0.0, 0.0), width: int = 320, height: int = 288,
                      fx: float | None = None) -> list:
    """Cameras on a ring or sphere around `center`, all looking at it.

    ring: azimuths uniform over [0, 2pi), elevations cycling through
    (0, -20, +20) degrees, so n=1 places the camera on the +x axis at
    zero elevation. sphere: Fibonacci-sphere directions.
    """
    if n < 1:
        raise ValueError("need at least one viewpoint")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    if strategy == "ring":
        elevations = np.deg2rad([0.0, -20.0, 20.0])
        for i in range(n):
            az = 2 * np.pi * i / n
            el = elevations[i % 3]
            d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            cams.append(look_at(center + radius * d, center, width=width, height=height, fx=fx))
    elif strategy == "sphere":
        golden = np.pi * (3.0 - np.sqrt(5.0))
        for i in range(n):
            zc = 1.0 - 2.0 * (i + 0.5) / n
            r = np.sqrt(max(1.0 - zc * zc, 0.0))
            d = np.array([r * np.cos(golden * i), r * np.sin(golden * i), zc])
            cams.append(look_at(center + radius * d, center, width=width, height=height, fx=fx))
    else:
        raise ValueError(f"unknown viewpoint strategy {strategy!r}")
    return cams


def fit_ring_radius(mesh: TriangleMesh, width: int = 320, height: int = 288,
                    fx: float | None = None, margin: float = 1.25) -> float:
    """Ring radius at which the whole mesh fits in the field of view."""
    fx = 0.65 * width if fx is None else fx
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    extent = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    half_fov = min(np.arctan(width / (2 * fx)), np.arctan(height / (2 * fx)))
    return margin * extent / np.tan(half_fov) + extent


@dataclass
class DepthFrame:
    """Depth image plus optional per-pixel surface hits (synthetic only).

    depth : (h, w) z in meters, 0 where the ray missed
    hit_triangle : (h, w) int32 triangle index, -1 where missed
    hit_bary : (h, w, 3) perspective-correct barycentric coordinates
    """

    depth: np.ndarray
    camera: Camera
    hit_triangle: np.ndarray | None = None
    hit_bary: np.ndarray | None = None

    @property
    def has_hits(self) -> bool:
        return self.hit_triangle is not None

    def hit_mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class LabeledPointCloud:
    """Point set with optional per-point soft labels and provenance ids."""

    points: np.ndarray  # (N, 3)
    labels: np.ndarray | None = None  # (S, N), columns sum to 1
    source_ids: np.ndarray | None = None  # (N,) pixel or vertex index

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape[1] != len(self.points):
                raise ValueError("label columns must match point count")

    @property
    def n_points(self) -> int:
        return len(self.points)


def mesh_vertex_cloud(mesh: TriangleMesh, labels: np.ndarray | None = None) -> LabeledPointCloud:
    """The mesh vertex set as a point cloud (ids = vertex indices)."""
    return LabeledPointCloud(mesh.vertices.copy(), labels=labels,
                             source_ids=np.arange(mesh.n_vertices, dtype=np.int64))


# ---------------------------------------------------------------------------
# Rasterization


def render_depth(mesh: TriangleMesh, camera: Camera, noise_scale: float = 0.0,
                 rng=None) -> DepthFrame:
    """Z-buffer rasterization with perspective-correct barycentrics.

    Triangles with any vertex closer than the near plane are culled
    whole (cameras are assumed to sit outside the shape). With
    `noise_scale` > 0, Gaussian noise with sigma = noise_scale * z^2 is
    added to hit depths (a crude consumer-sensor error model).
    """
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    hit_tri = np.full((h, w), -1, dtype=np.int32)
    hit_bary = np.zeros((h, w, 3), dtype=np.float32)

    vc = camera.to_camera(mesh.vertices)
    tz = vc[:, 2][mesh.triangles]  # (T, 3)
    valid = (tz > _NEAR).all(axis=1)
    if valid.any():
        zbuf = np.full(h * w, np.inf)
        best_tri = np.full(h * w, -1, dtype=np.int64)
        best_bary = np.zeros((h * w, 3))

        u = camera.fx * vc[:, 0] / vc[:, 2] + camera.cx
        v = camera.fy * vc[:, 1] / vc[:, 2] + camera.cy
        su = u[mesh.triangles]  # (T, 3) screen x per corner
        sv = v[mesh.triangles]

        lo_x = np.ceil(np.clip(su.min(axis=1), 0.5, None) - 0.5).astype(np.int64)
        hi_x = np.floor(np.clip(su.max(axis=1), None, w - 0.5) - 0.5).astype(np.int64)
        lo_y = np.ceil(np.clip(sv.min(axis=1), 0.5, None) - 0.5).astype(np.int64)
        hi_y = np.floor(np.clip(sv.max(axis=1), None, h - 0.5) - 0.5).astype(np.int64)
        nx = np.maximum(hi_x - lo_x + 1, 0)
        ny = np.maximum(hi_y - lo_y + 1, 0)
        counts = np.where(valid, nx * ny, 0)

        tri_ids = np.flatnonzero(counts > 0)
        order = np.argsort(counts[tri_ids])  # group small triangles together
        tri_ids = tri_ids[order]
        csum = np.cumsum(counts[tri_ids])
        start = 0
        while start < len(tri_ids):
            base = csum[start - 1] if start else 0
            stop = max(int(np.searchsorted(csum, base + _CHUNK, side="right")), start + 1)
            chunk = tri_ids[start:stop]
            _rasterize_chunk(chunk, su, sv, tz, lo_x, nx, lo_y, counts,
                             w, zbuf, best_tri, best_bary)
            start = stop

        hit = best_tri >= 0
        depth = np.where(hit, np.where(np.isfinite(zbuf), zbuf, 0.0), 0.0).reshape(h, w)
        hit_tri = np.where(hit, best_tri, -1).astype(np.int32).reshape(h, w)
        hit_bary = best_bary.reshape(h, w, 3).astype(np.float32)

    if noise_scale > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = depth > 0
        depth = np.where(mask, np.maximum(
            depth + rng.normal(0.0, noise_scale, depth.shape) * depth**2, _NEAR), 0.0)

    return DepthFrame(depth, camera, hit_triangle=hit_tri, hit_bary=hit_bary)


def _rasterize_chunk(chunk, su, sv, tz, lo_x, nx, lo_y, counts, w,
                     zbuf, best_tri, best_bary):
    c = counts[chunk]
    total = int(c.sum())
    if total == 0:
        return
    tri = np.repeat(chunk, c)
    offsets = np.concatenate([[0], np.cumsum(c)[:-1]])
    local = np.arange(total) - np.repeat(offsets, c)
    nxt = nx[tri]
    px = lo_x[tri] + local % nxt + 0.5
    py = lo_y[tri] + local // nxt + 0.5

    x0, x1, x2 = su[tri, 0], su[tri, 1], su[tri, 2]
    y0, y1, y2 = sv[tri, 0], sv[tri, 1], sv[tri, 2]
    denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    ok = np.abs(denom) > 1e-30
    inv = np.where(ok, 1.0 / np.where(ok, denom, 1.0), 0.0)
    l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) * inv
    l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) * inv
    l2 = 1.0 - l0 - l1
    inside = ok & (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
    if not inside.any():
        return

    tri, px, py = tri[inside], px[inside], py[inside]
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    z0, z1, z2 = tz[tri, 0], tz[tri, 1], tz[tri, 2]
    inv_z = l0 / z0 + l1 / z1 + l2 / z2
    z = 1.0 / inv_z
    b0, b1, b2 = l0 / z0 * z, l1 / z1 * z, l2 / z2 * z

    pid = py.astype(np.int64) * w + px.astype(np.int64)
    # nearest candidate per pixel within the chunk, then merge with buffer
    sel = np.lexsort((z, pid))
    pid_s = pid[sel]
    first = np.ones(len(sel), dtype=bool)
    first[1:] = pid_s[1:] != pid_s[:-1]
    sel = sel[first]
    win = z[sel] < zbuf[pid[sel]]
    sel = sel[win]
    ids = pid[sel]
    zbuf[ids] = z[sel]
    best_tri[ids] = tri[sel]
    best_bary[ids, 0] = b0[sel]
    best_bary[ids, 1] = b1[sel]
    best_bary[ids, 2] = b2[sel]


# ---------------------------------------------------------------------------
# Labels and back-projection


def label_frame(frame: DepthFrame, field, mesh: TriangleMesh,
                to_world: bool = False) -> LabeledPointCloud:
    """Per-pixel soft labels from a frame's surface hits.

    Each hit pixel blends the label columns of its triangle's three
    vertices with the perspective-correct barycentric weights and
    renormalizes. Positions are back-projected (camera space unless
    `to_world`); provenance ids are flat pixel indices.
    """
    if not frame.has_hits:
        raise ValueError("frame has no hit records (real capture?); cannot label")
    labels = field.labels if hasattr(field, "labels") else np.asarray(field)
    mask = frame.hit_mask()
    tris = frame.hit_triangle[mask]
    bary = frame.hit_bary[mask].astype(np.float64)  # (N, 3)
    vert_ids = mesh.triangles[tris]  # (N, 3)
    blended = np.einsum("snk,nk->sn", labels[:, vert_ids], bary)
    sums = blended.sum(axis=0)
    blended = blended / np.where(sums > 0, sums, 1.0)

    cloud = backproject(frame, to_world=to_world)
    cloud.labels = blended
    return cloud


def backproject(frame: DepthFrame, to_world: bool = False) -> LabeledPointCloud:
    """One point per nonzero-depth pixel: position = z * unit-z pixel ray."""
    mask = frame.hit_mask()
    rays = frame.camera.pixel_rays()[mask]
    pts = rays * frame.depth[mask][:, None]
    if to_world:
        pts = frame.camera.to_world(pts)
    ids = np.flatnonzero(mask.ravel()).astype(np.int64)
    return LabeledPointCloud(pts, source_ids=ids)


# ---------------------------------------------------------------------------
# File I/O


def write_depth_png(frame: DepthFrame, path):
    """16-bit grayscale PNG in millimeters plus a camera sidecar JSON."""
    path = Path(path)
    mm = np.clip(np.round(frame.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)
    cam = frame.camera
    sidecar = {
        "format": "vmark-camera",
        "version": 1,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def read_depth_png(path) -> DepthFrame:
    """Read a depth PNG and its camera sidecar (no hit records)."""
    path = Path(path)
    img = np.asarray(Image.open(path), dtype=np.uint16)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("format") != "vmark-camera":
        raise ValueError(f"bad camera sidecar for {path}")
    cam = Camera(sidecar["fx"], sidecar["fy"], sidecar["cx"], sidecar["cy"],
                 sidecar["width"], sidecar["height"],
                 np.asarray(sidecar["rotation"]), np.asarray(sidecar["translation"]))
    return DepthFrame(img.astype(np.float64) / 1000.0, cam)


def export_cloud(cloud: LabeledPointCloud, ply_path, labels_path=None):
    """Write points as PLY; labels (if any) go to a VMRK sidecar."""
    from .softlabel import write_labels

    ply_path = Path(ply_path)
    with open(ply_path, "wb") as f:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {cloud.n_points}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "element face 0\nproperty list uchar int vertex_indices\n"
            "end_header\n"
        )
        f.write(header.encode("ascii"))
        f.write(cloud.points.astype("<f4").tobytes())
    if cloud.labels is not None and labels_path is not None:
        write_labels(labels_path, cloud.labels)
