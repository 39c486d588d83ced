"""Linear (P1) triangle element kernel.

Element quantities are computed for all triangles at once. Scatter into
nodal vectors goes through ``np.add.at`` in triangle order, so results are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from geometry import Mesh

# 3-point rule, exact for quadratics; rows are barycentric coordinates
TRIANGLE_POINTS = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])
TRIANGLE_WEIGHTS = np.full(3, 1.0 / 3.0)

# 2-point Gauss rule on [0, 1]
EDGE_POINTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
EDGE_WEIGHTS = np.array([0.5, 0.5])


@dataclass(frozen=True, eq=False)
class ElementGeometry:
    """Areas, basis gradients and diameters of every triangle.

    ``gradients[t, a]`` is the constant gradient of the hat function of the
    a-th vertex of triangle ``t``.
    """

    areas: np.ndarray
    gradients: np.ndarray
    diameters: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "ElementGeometry":
        p = mesh.nodes[mesh.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        gradients = np.stack([-(g1 + g2), g1, g2], axis=1)
        sides = p[:, [1, 2, 0]] - p
        diameters = np.linalg.norm(sides, axis=2).max(axis=1)
        return cls(areas=0.5 * det, gradients=gradients, diameters=diameters)


@lru_cache(maxsize=16)
def element_geometry(mesh: Mesh) -> ElementGeometry:
    """Element data of ``mesh``, computed once per mesh object."""
    return ElementGeometry.from_mesh(mesh)


def at_quadrature(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Linear interpolant of a nodal field at the triangle quadrature points.

    Returns an array of shape ``(T, 3) + nodal.shape[1:]``.
    """
    values = nodal[mesh.triangles]
    return np.einsum("qa,ta...->tq...", TRIANGLE_POINTS, values)


def element_gradient(mesh: Mesh, geometry: ElementGeometry, nodal: np.ndarray) -> np.ndarray:
    """Per-triangle gradient of a nodal field; the last axis is the derivative.

    A nodal vector field ``u`` of shape (N, 2) gives ``grad[t, i, j] = d_j u_i``.
    """
    values = nodal[mesh.triangles]
    return np.einsum("ta...,taj->t...j", values, geometry.gradients)


def load_vector(mesh: Mesh, geometry: ElementGeometry, at_points: np.ndarray) -> np.ndarray:
    """Integrals of a quadrature-point field against every hat function.

    ``at_points`` has shape ``(T, 3) + S``; the result has shape ``(N,) + S``.
    """
    weights = geometry.areas[:, None] * TRIANGLE_WEIGHTS[None, :]
    local = np.einsum("tq,qa,tq...->ta...", weights, TRIANGLE_POINTS, at_points)
    result = np.zeros((mesh.n_nodes,) + at_points.shape[2:])
    np.add.at(result, mesh.triangles, local)
    return result


def flux_load_vector(mesh: Mesh, geometry: ElementGeometry, flux: np.ndarray) -> np.ndarray:
    """Integrals of ``flux . grad(phi_a)`` for a flux given at quadrature points.

    ``flux`` has shape ``(T, 3) + S + (2,)``; the result has shape ``(N,) + S``.
    """
    weights = geometry.areas[:, None] * TRIANGLE_WEIGHTS[None, :]
    local = np.einsum("tq,tq...j,taj->ta...", weights, flux, geometry.gradients)
    result = np.zeros((mesh.n_nodes,) + flux.shape[2:-1])
    np.add.at(result, mesh.triangles, local)
    return result


def _scatter(mesh: Mesh, local: np.ndarray) -> sparse.csr_matrix:
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def mass_matrix(mesh: Mesh, geometry: ElementGeometry) -> sparse.csr_matrix:
    """Consistent scalar P1 mass matrix."""
    reference = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, geometry.areas[:, None, None] * reference[None])


def stiffness_matrix(
    mesh: Mesh, geometry: ElementGeometry, coefficient: Optional[np.ndarray] = None
) -> sparse.csr_matrix:
    """Scalar P1 stiffness ``int c grad(phi_a) . grad(phi_b)`` with per-triangle ``c``."""
    scale = geometry.areas if coefficient is None else geometry.areas * coefficient
    local = np.einsum("t,taj,tbj->tab", scale, geometry.gradients, geometry.gradients)
    return _scatter(mesh, local)


def basis_integrals(mesh: Mesh, geometry: ElementGeometry) -> np.ndarray:
    """``int phi_a`` for every node."""
    result = np.zeros(mesh.n_nodes)
    np.add.at(result, mesh.triangles, np.repeat(geometry.areas[:, None] / 3.0, 3, axis=1))
    return result


def body_edge_points(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points on the body edges.

    Returns ``(edges, s, points, weights)``: the body edge indices, the edge
    parameter of each point (shape ``(E, 2)``), the point coordinates
    ``(E, 2, 2)`` and the quadrature weights ``(E, 2)`` including edge length.
    """
    edges = mesh.body_edges
    ends = mesh.nodes[mesh.boundary_edges[edges]]
    s = np.broadcast_to(EDGE_POINTS, (len(edges), 2))
    points = (1.0 - s)[..., None] * ends[:, None, 0] + s[..., None] * ends[:, None, 1]
    lengths = np.linalg.norm(ends[:, 1] - ends[:, 0], axis=1)
    weights = lengths[:, None] * EDGE_WEIGHTS[None, :]
    return edges, s, points, weights


def circle_normals(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Exact body-circle normal at ``points``, pointing toward ``center``."""
    offset = center - points
    return offset / np.linalg.norm(offset, axis=-1, keepdims=True)


def interpolate_nodal(mesh: Mesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate a nodal P1 field of ``mesh`` at arbitrary ``points``.

    Each point is located among the triangles with the nearest centroids.
    Points just outside the mesh use the clipped barycentric weights of the
    best candidate triangle.
    """
    points = np.asarray(points, dtype=float)
    corners = mesh.nodes[mesh.triangles]
    k = min(32, mesh.n_triangles)
    _, candidates = cKDTree(corners.mean(axis=1)).query(points, k=k)
    candidates = np.asarray(candidates).reshape(len(points), k)

    p = corners[candidates]
    e1 = p[..., 1, :] - p[..., 0, :]
    e2 = p[..., 2, :] - p[..., 0, :]
    r = points[:, None, :] - p[..., 0, :]
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    l1 = (r[..., 0] * e2[..., 1] - r[..., 1] * e2[..., 0]) / det
    l2 = (e1[..., 0] * r[..., 1] - e1[..., 1] * r[..., 0]) / det
    barycentric = np.stack([1.0 - l1 - l2, l1, l2], axis=-1)

    rows = np.arange(len(points))
    best = np.argmax(barycentric.min(axis=-1), axis=1)
    weights = np.clip(barycentric[rows, best], 0.0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    vertices = mesh.triangles[candidates[rows, best]]
    return np.einsum("pa,pa...->p...", weights, np.asarray(values, dtype=float)[vertices])
