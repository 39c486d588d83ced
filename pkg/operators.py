"""Transformed operators M, L, N and G in weak form.

Every ``apply_*`` returns a load vector: the integral of the operator image
against each P1 hat function, one row per node. ``project_to_nodes`` turns a
load vector into nodal values through the consistent mass matrix.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.sparse.linalg import splu

from errors import ParameterError
from fem import (
    at_quadrature,
    element_geometry,
    element_gradient,
    flux_load_vector,
    load_vector,
    mass_matrix,
)
from geometry import Mesh
from transform import TransformState


def check_field(values: np.ndarray, mesh: Mesh, components: int, name: str = "field") -> np.ndarray:
    """Validate a nodal field and return it as a float array."""
    array = np.asarray(values, dtype=float)
    expected = (mesh.n_nodes,) if components == 1 else (mesh.n_nodes, components)
    if array.shape != expected:
        raise ParameterError(name, f"expected shape {expected}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ParameterError(name, "contains non-finite values")
    return array


@lru_cache(maxsize=16)
def _mass_factor(mesh: Mesh):
    return splu(mass_matrix(mesh, element_geometry(mesh)).tocsc())


def project_to_nodes(load: np.ndarray, mesh: Mesh) -> np.ndarray:
    """L2 projection of a load vector onto nodal values."""
    return _mass_factor(mesh).solve(np.ascontiguousarray(load, dtype=float))


def apply_M(u: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """Transformed time-derivative correction ``Ydot.grad u + (Gamma Ydot + dY dXdot) u``."""
    u = check_field(u, mesh, 2, "u")
    geometry = element_geometry(mesh)
    grad_u = element_gradient(mesh, geometry, u)
    u_q = at_quadrature(mesh, u)
    y_dot = at_quadrature(mesh, state.Y_dot)
    coefficient = (
        np.einsum("tqijk,tqk->tqij", at_quadrature(mesh, state.gamma), y_dot)
        + np.einsum("tqik,tqkj->tqij", at_quadrature(mesh, state.J_Y), at_quadrature(mesh, state.grad_X_dot))
    )
    values = np.einsum("tqj,tij->tqi", y_dot, grad_u) + np.einsum("tqij,tqj->tqi", coefficient, u_q)
    return load_vector(mesh, geometry, values)


def _transformed_laplacian(u: np.ndarray, state: TransformState, mesh: Mesh, minus_identity: bool) -> np.ndarray:
    geometry = element_geometry(mesh)
    grad_u = element_gradient(mesh, geometry, u)
    u_q = at_quadrature(mesh, u)
    g_q = at_quadrature(mesh, state.g_con)
    gamma_q = at_quadrature(mesh, state.gamma)

    metric = g_q - np.eye(2) if minus_identity else g_q
    flux = np.einsum("tqjk,tik->tqij", metric, grad_u)
    leading = -flux_load_vector(mesh, geometry, flux)

    # d_k (g^kl Gamma^i_jl) from the per-triangle gradient of the nodal product
    product = np.einsum("nkl,nijl->nkij", state.g_con, state.gamma)
    divergence = np.einsum("tkijk->tij", element_gradient(mesh, geometry, product))
    quadratic = np.einsum("tqkl,tqmjl,tqikm->tqij", g_q, gamma_q, gamma_q)
    coefficient = divergence[:, None] + quadratic
    lower = (
        2.0 * np.einsum("tqkl,tqijk,tjl->tqi", g_q, gamma_q, grad_u)
        + np.einsum("tqij,tqj->tqi", coefficient, u_q)
    )
    return leading + load_vector(mesh, geometry, lower)


def apply_L(u: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """Transformed Laplacian; the divergence-form term is integrated by parts."""
    return _transformed_laplacian(check_field(u, mesh, 2, "u"), state, mesh, minus_identity=False)


def apply_L_minus_laplacian(u: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """``(L - Delta) u`` with the metric deviation formed before integration."""
    return _transformed_laplacian(check_field(u, mesh, 2, "u"), state, mesh, minus_identity=True)


def apply_laplacian(u: np.ndarray, mesh: Mesh) -> np.ndarray:
    u = check_field(u, mesh, 2, "u")
    geometry = element_geometry(mesh)
    grad_u = element_gradient(mesh, geometry, u)
    flux = np.broadcast_to(grad_u[:, None], (mesh.n_triangles, 3, 2, 2))
    return -flux_load_vector(mesh, geometry, flux)


def apply_N(u: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """Transformed convection ``(u.grad) u + Gamma(u, u)``."""
    u = check_field(u, mesh, 2, "u")
    geometry = element_geometry(mesh)
    grad_u = element_gradient(mesh, geometry, u)
    u_q = at_quadrature(mesh, u)
    gamma_q = at_quadrature(mesh, state.gamma)
    values = (
        np.einsum("tqj,tij->tqi", u_q, grad_u)
        + np.einsum("tqijk,tqj,tqk->tqi", gamma_q, u_q, u_q)
    )
    return load_vector(mesh, geometry, values)


def apply_G(p: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """Transformed gradient ``g^ij d_j p``."""
    p = check_field(p, mesh, 1, "p")
    geometry = element_geometry(mesh)
    grad_p = element_gradient(mesh, geometry, p)
    values = np.einsum("tqij,tj->tqi", at_quadrature(mesh, state.g_con), grad_p)
    return load_vector(mesh, geometry, values)


def apply_gradient_minus_G(p: np.ndarray, state: TransformState, mesh: Mesh) -> np.ndarray:
    """``(grad - G) p`` with the metric deviation formed before integration."""
    p = check_field(p, mesh, 1, "p")
    geometry = element_geometry(mesh)
    grad_p = element_gradient(mesh, geometry, p)
    deviation = np.eye(2) - at_quadrature(mesh, state.g_con)
    return load_vector(mesh, geometry, np.einsum("tqij,tj->tqi", deviation, grad_p))
