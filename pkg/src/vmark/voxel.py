"""Sparse voxelization of labeled point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import LabeledPointCloud


@dataclass
class SparseVoxelGrid:
    """Occupied-voxel view of a point cloud.

    coords : (V, 3) unique integer voxel coordinates (floor(p / size))
    point_voxel : (N,) index of each input point's voxel
    features : (V, F) per-voxel input features (constant 1 by default)
    labels : (S, V) optional per-voxel soft labels (renormalized means)
    voxel_size : edge length in meters
    """

    coords: np.ndarray
    point_voxel: np.ndarray
    features: np.ndarray
    voxel_size: float
    labels: np.ndarray | None = None

    @property
    def n_voxels(self) -> int:
        return len(self.coords)

    @property
    def n_points(self) -> int:
        return len(self.point_voxel)

    def voxel_point_counts(self) -> np.ndarray:
        return np.bincount(self.point_voxel, minlength=self.n_voxels)


def voxelize(cloud: LabeledPointCloud, voxel_size: float) -> SparseVoxelGrid:
    """Quantize a cloud onto a sparse integer grid.

    Deterministic: voxel order is the lexicographic order of their
    coordinates. When the cloud carries labels, each voxel's label is
    the renormalized mean of its member points' label columns.
    """
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    if cloud.n_points == 0:
        raise ValueError("cannot voxelize an empty cloud")
    ijk = np.floor(cloud.points / voxel_size).astype(np.int64)
    coords, point_voxel = np.unique(ijk, axis=0, return_inverse=True)
    point_voxel = point_voxel.ravel()
    features = np.ones((len(coords), 1))

    labels = None
    if cloud.labels is not None:
        s = cloud.labels.shape[0]
        sums = np.zeros((s, len(coords)))
        np.add.at(sums.T, point_voxel, cloud.labels.T)
        denom = sums.sum(axis=0)
        labels = sums / np.where(denom > 0, denom, 1.0)
    return SparseVoxelGrid(coords, point_voxel, features, float(voxel_size), labels=labels)
