"""Ray-triangle intersection against a whole mesh (Moller-Trumbore)."""

from __future__ import annotations

import numpy as np

from .mesh import MeshError, SurfacePoint, TriangleMesh

_EPS = 1e-12


def ray_intersect(mesh: TriangleMesh, origin, direction, min_t: float = 1e-9):
    """Nearest forward intersection of a ray with the mesh.

    Parameters
    ----------
    origin : (3,) array
    direction : (3,) array
        Must be unit length within 1e-9.
    min_t : float
        Smallest accepted ray parameter; hits closer than this (e.g. the
        origin sitting on the surface) are ignored.

    Returns
    -------
    (SurfacePoint, float) or None
        Surface point and distance along the ray of the nearest hit with
        the smallest positive parameter, or None when the ray misses.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise MeshError("ray direction must be unit length")

    c = mesh.corners()
    e1 = c[:, 1] - c[:, 0]
    e2 = c[:, 2] - c[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > _EPS
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)

    tvec = origin - c[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det

    hit = ok & (u >= -_EPS) & (v >= -_EPS) & (u + v <= 1.0 + _EPS) & (t > min_t)
    if not hit.any():
        return None
    idx = np.flatnonzero(hit)
    best = idx[np.argmin(t[idx])]
    bu, bv = np.clip(u[best], 0.0, 1.0), np.clip(v[best], 0.0, 1.0)
    bary = np.array([max(1.0 - bu - bv, 0.0), bu, bv])
    bary /= bary.sum()
    return SurfacePoint(int(best), bary), float(t[best])
