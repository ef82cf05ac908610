"""Discrete cotangent Laplacian assembly.

Returns the positive semidefinite stiffness form (the negated surface
Laplacian): rows sum to zero, off-diagonals are the negated cotangent
edge weights. With ``clamp_negative`` (the default) negative cotangent
sums are clamped to zero, which preserves the discrete maximum
principle the soft-label solver relies on.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .mesh import TriangleMesh


def cotangent_laplacian(mesh: TriangleMesh, clamp_negative: bool = True) -> sparse.csr_matrix:
    """Assemble the (D, D) cotangent stiffness matrix of a mesh.

    Parameters
    ----------
    mesh : TriangleMesh
    clamp_negative : bool
        Clamp per-edge cotangent weights at zero so all off-diagonal
        entries are <= 0 and the operator plus any positive diagonal is
        SPD. Set False for the raw (possibly indefinite) cotan weights.

    Returns
    -------
    scipy.sparse.csr_matrix
        Symmetric by construction; each row sums to 0 exactly (diagonal
        assembled as the negated off-diagonal row sum).
    """
    t = mesh.triangles
    c = mesh.corners()
    d = mesh.n_vertices

    # cot of the angle at corner k = dot of adjacent edges / (2 * area)
    cots = np.empty((len(t), 3))
    for k in range(3):
        a, b = c[:, (k + 1) % 3] - c[:, k], c[:, (k + 2) % 3] - c[:, k]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cots[:, k] = np.einsum("ij,ij->i", a, b) / np.maximum(cross, 1e-300)

    # angle at corner k faces the edge (k+1, k+2)
    i = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 2], t[:, 0], t[:, 1]])
    w = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])

    weights = sparse.coo_matrix((w, (i, j)), shape=(d, d)).tocsr()
    weights = weights + weights.T  # accumulates both incident triangles
    if clamp_negative:
        weights.data = np.maximum(weights.data, 0.0)
    lap = sparse.diags(np.asarray(weights.sum(axis=1)).ravel()) - weights
    lap = lap.tocsr()
    lap.eliminate_zeros()
    return lap
