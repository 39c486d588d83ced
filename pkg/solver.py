"""Coupled Stokes / rigid-body saddle-point system for one implicit Euler step.

Unknowns live in a "full" velocity vector ``[u_0x, u_0y, ..., u_Nx, u_Ny,
xi_x, xi_y, w]`` and a nodal pressure. A prolongation matrix maps the free
dofs (interior nodes, the tangential component at body nodes, the rigid
velocities) onto that vector: wall nodes are zero, and the normal component
at a body node equals ``(xi + w x (y - x_c)) . n``. The reduced matrix
``P^T K P`` is the discrete form of the bilinear form on V.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from errors import ParameterError, SolverError
from fem import basis_integrals, body_edge_points, element_geometry, mass_matrix, stiffness_matrix
from geometry import Mesh
from transform import RigidState

logger = logging.getLogger(__name__)

DEFAULT_SOLVER_TOL = 1e-10
DEFAULT_DELTA_STAB = 0.05
MAX_REFINEMENT_STEPS = 3


@dataclass(frozen=True, eq=False)
class CoupledState:
    """Fluid velocity and pressure with the rigid velocities ``(xi, w)``."""

    z_F: np.ndarray
    q_F: np.ndarray
    xi: np.ndarray
    w: float

    def __post_init__(self):
        z = np.array(self.z_F, dtype=float)
        q = np.array(self.q_F, dtype=float)
        if z.ndim != 2 or z.shape[1] != 2:
            raise ParameterError("z_F", f"expected shape (N, 2), got {z.shape}")
        if q.shape != (z.shape[0],):
            raise ParameterError("q_F", f"expected shape ({z.shape[0]},), got {q.shape}")
        object.__setattr__(self, "z_F", z)
        object.__setattr__(self, "q_F", q)
        object.__setattr__(self, "xi", np.array(self.xi, dtype=float).reshape(2))
        object.__setattr__(self, "w", float(self.w))

    @classmethod
    def zeros(cls, n_nodes: int) -> "CoupledState":
        return cls(np.zeros((n_nodes, 2)), np.zeros(n_nodes), np.zeros(2), 0.0)

    @classmethod
    def from_full(cls, velocity: np.ndarray, pressure: np.ndarray) -> "CoupledState":
        n = (velocity.shape[0] - 3) // 2
        return cls(velocity[: 2 * n].reshape(n, 2), pressure, velocity[2 * n: 2 * n + 2], velocity[-1])

    @property
    def n_nodes(self) -> int:
        return int(self.z_F.shape[0])

    def full_velocity(self) -> np.ndarray:
        return np.concatenate([self.z_F.ravel(), self.xi, [self.w]])

    def __sub__(self, other: "CoupledState") -> "CoupledState":
        return CoupledState(self.z_F - other.z_F, self.q_F - other.q_F, self.xi - other.xi, self.w - other.w)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Free velocity dofs and how they expand to the full velocity vector."""

    prolongation: sparse.csr_matrix
    offset: np.ndarray
    interior_nodes: np.ndarray
    body_nodes: np.ndarray
    tangents: np.ndarray
    rigid_free: bool

    @property
    def n_free(self) -> int:
        return int(self.prolongation.shape[1])

    @property
    def n_full(self) -> int:
        return int(self.prolongation.shape[0])

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        return self.prolongation @ reduced + self.offset


def build_dof_map(mesh: Mesh, prescribed_rigid: Optional[Sequence[float]] = None) -> DofMap:
    """Interior nodes, rotated body dofs and rigid dofs; wall nodes are eliminated."""
    n = mesh.n_nodes
    n_full = 2 * n + 3
    constrained = np.zeros(n, dtype=bool)
    constrained[mesh.body_nodes] = True
    constrained[mesh.wall_nodes] = True
    interior = np.flatnonzero(~constrained)
    normals = mesh.node_normals
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    lever = mesh.nodes[mesh.body_nodes] - mesh.body_center
    spin = np.column_stack([-lever[:, 1], lever[:, 0]])

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    n_interior = 2 * len(interior)
    rows.append(np.column_stack([2 * interior, 2 * interior + 1]).ravel())
    cols.append(np.arange(n_interior))
    vals.append(np.ones(n_interior))

    k = np.arange(len(mesh.body_nodes))
    base_t = n_interior
    for c in range(2):
        rows.append(2 * mesh.body_nodes + c)
        cols.append(base_t + k)
        vals.append(tangents[:, c])

    base_r = base_t + len(k)
    normal_spin = np.einsum("ki,ki->k", normals, spin)
    for c in range(2):
        for d in range(2):
            rows.append(2 * mesh.body_nodes + c)
            cols.append(np.full(len(k), base_r + d))
            vals.append(normals[:, c] * normals[:, d])
        rows.append(2 * mesh.body_nodes + c)
        cols.append(np.full(len(k), base_r + 2))
        vals.append(normals[:, c] * normal_spin)
    rows.append(np.arange(2 * n, n_full))
    cols.append(base_r + np.arange(3))
    vals.append(np.ones(3))

    full = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_full, base_r + 3),
    ).tocsc()
    if prescribed_rigid is None:
        return DofMap(full.tocsr(), np.zeros(n_full), interior, mesh.body_nodes, tangents, True)
    rigid = np.asarray(prescribed_rigid, dtype=float).reshape(3)
    return DofMap(
        full[:, :base_r].tocsr(),
        full[:, base_r:] @ rigid,
        interior,
        mesh.body_nodes,
        tangents,
        False,
    )


@lru_cache(maxsize=16)
def fluid_mass_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """Consistent mass matrix for interleaved 2-vector nodal fields."""
    return sparse.kron(mass_matrix(mesh, element_geometry(mesh)), sparse.identity(2), format="csr")


def full_mass_matrix(mesh: Mesh, rigid: RigidState) -> sparse.csr_matrix:
    """Matrix of the inner product ``int z.v + m xi.xi' + I w w'``."""
    inertia = sparse.diags([rigid.m, rigid.m, rigid.I_moment])
    return sparse.block_diag([fluid_mass_matrix(mesh), inertia], format="csr")


def viscous_matrix(mesh: Mesh, mu: float) -> sparse.csr_matrix:
    """``2 mu int D(u):D(v)`` on interleaved nodal dofs."""
    geometry = element_geometry(mesh)
    g = geometry.gradients
    gram = np.einsum("taj,tbj->tab", g, g)
    local = np.einsum("tab,cd->tacbd", gram, np.eye(2)) + np.einsum("tad,tbc->tacbd", g, g)
    local *= (mu * geometry.areas)[:, None, None, None, None]
    dof = 2 * mesh.triangles[:, :, None] + np.arange(2)[None, None, :]
    shape = local.shape
    rows = np.broadcast_to(dof[:, :, :, None, None], shape).ravel()
    cols = np.broadcast_to(dof[:, None, None, :, :], shape).ravel()
    size = 2 * mesh.n_nodes
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(size, size)).tocsr()


def slip_jump_operator(mesh: Mesh) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Values of ``z_F - z_B`` at the body-edge Gauss points and their weights.

    Row ``2 * p + c`` is component ``c`` at Gauss point ``p``.
    """
    n = mesh.n_nodes
    edges, s, points, weights = body_edge_points(mesh)
    ends = mesh.boundary_edges[edges]
    n_points = s.size
    point = np.arange(n_points)
    s = s.ravel()
    a = np.repeat(ends[:, 0], 2)
    b = np.repeat(ends[:, 1], 2)
    lever = points.reshape(-1, 2) - mesh.body_center
    spin = np.column_stack([-lever[:, 1], lever[:, 0]])

    rows, cols, vals = [], [], []
    for c in range(2):
        row = 2 * point + c
        rows += [row, row, row, row]
        cols += [2 * a + c, 2 * b + c, np.full(n_points, 2 * n + c), np.full(n_points, 2 * n + 2)]
        vals += [1.0 - s, s, -np.ones(n_points), -spin[:, c]]
    jump = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n_points, 2 * n + 3),
    ).tocsr()
    return jump, np.repeat(weights.ravel(), 2)


@lru_cache(maxsize=32)
def full_stiffness_matrix(mesh: Mesh, mu: float, beta: float) -> sparse.csr_matrix:
    """Matrix of ``2 mu int D:D + beta oint (z_F - z_B).(v_F - v_B)`` on full dofs."""
    viscous = sparse.block_diag([viscous_matrix(mesh, mu), sparse.csr_matrix((3, 3))], format="csr")
    jump, weights = slip_jump_operator(mesh)
    return (viscous + beta * (jump.T @ sparse.diags(weights) @ jump)).tocsr()


def divergence_matrix(mesh: Mesh) -> sparse.csr_matrix:
    """``-int s div z_F`` with pressure rows and full velocity columns."""
    geometry = element_geometry(mesh)
    local = -(geometry.areas / 3.0)[:, None, None, None] * np.broadcast_to(
        geometry.gradients[:, None, :, :], (mesh.n_triangles, 3, 3, 2)
    )
    shape = local.shape
    rows = np.broadcast_to(mesh.triangles[:, :, None, None], shape).ravel()
    cols = np.broadcast_to(2 * mesh.triangles[:, None, :, None] + np.arange(2), shape).ravel()
    return sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, 2 * mesh.n_nodes + 3)
    ).tocsr()


def stabilization_matrix(mesh: Mesh, mu: float, delta_stab: float = DEFAULT_DELTA_STAB) -> sparse.csr_matrix:
    """Pressure Laplacian weighted by ``delta_stab * h_T**2 / mu``."""
    geometry = element_geometry(mesh)
    return stiffness_matrix(mesh, geometry, delta_stab * geometry.diameters**2 / mu)


@dataclass(frozen=True, eq=False)
class CoupledOperator:
    """Left-hand side of one implicit step, factorized on first use."""

    mesh: Mesh
    dofs: DofMap
    dt: float
    mass: sparse.csr_matrix
    stiffness: sparse.csr_matrix
    divergence: sparse.csr_matrix
    stabilization: sparse.csr_matrix
    gauge: np.ndarray
    matrix: sparse.csr_matrix

    @property
    def n_free(self) -> int:
        return self.dofs.n_free

    @cached_property
    def factor(self):
        try:
            return splu(self.matrix.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"saddle-point factorization failed: {exc}") from exc


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    operator: CoupledOperator
    rhs: np.ndarray

    @property
    def matrix(self) -> sparse.csr_matrix:
        return self.operator.matrix

    @property
    def dofs(self) -> DofMap:
        return self.operator.dofs


def build_coupled_operator(
    mesh: Mesh,
    dt: float,
    mu: float,
    beta: float,
    rigid: RigidState,
    prescribed_rigid: Optional[Sequence[float]] = None,
    delta_stab: float = DEFAULT_DELTA_STAB,
    viscous: bool = True,
) -> CoupledOperator:
    """Assemble and reduce the saddle-point matrix.

    Args:
        mesh: Reference mesh of the current window.
        dt: Time step.
        mu: Viscosity; also scales the pressure stabilization.
        beta: Slip coefficient.
        rigid: Supplies mass and moment of inertia.
        prescribed_rigid: ``(xi_x, xi_y, w)`` to hold the body motion fixed.
        delta_stab: Pressure stabilization constant.
        viscous: Drop the stiffness part when False (used for L2 projections).

    Raises:
        ParameterError: If ``dt``, ``mu`` or ``beta`` are out of range.
    """
    if not dt > 0.0:
        raise ParameterError("dt", f"must be positive, got {dt}")
    if not mu > 0.0:
        raise ParameterError("mu", f"must be positive, got {mu}")
    if not beta >= 0.0:
        raise ParameterError("beta", f"must be non-negative, got {beta}")

    dofs = build_dof_map(mesh, prescribed_rigid)
    mass = full_mass_matrix(mesh, rigid)
    n_full = dofs.n_full
    stiffness = full_stiffness_matrix(mesh, float(mu), float(beta)) if viscous else sparse.csr_matrix((n_full, n_full))
    divergence = divergence_matrix(mesh)
    stabilization = stabilization_matrix(mesh, mu, delta_stab)
    gauge = basis_integrals(mesh, element_geometry(mesh))

    P = dofs.prolongation
    velocity_block = (P.T @ (mass / dt + stiffness) @ P).tocsr()
    coupling = (divergence @ P).tocsr()
    matrix = sparse.bmat(
        [
            [velocity_block, coupling.T, None],
            [coupling, -stabilization, sparse.csr_matrix(gauge[:, None])],
            [None, sparse.csr_matrix(gauge[None, :]), sparse.csr_matrix((1, 1))],
        ],
        format="csr",
    )
    logger.debug("coupled operator: %d free velocity dofs, %d pressure dofs", dofs.n_free, mesh.n_nodes)
    return CoupledOperator(mesh, dofs, dt, mass, stiffness, divergence, stabilization, gauge, matrix)


def assemble_coupled_system(
    mesh: Mesh,
    dt: float,
    mu: float,
    beta: float,
    rigid: RigidState,
    z_prev: CoupledState,
    F0: np.ndarray,
    F1: Sequence[float],
    F2: float,
    operator: Optional[CoupledOperator] = None,
    prescribed_rigid: Optional[Sequence[float]] = None,
    delta_stab: float = DEFAULT_DELTA_STAB,
) -> SaddleSystem:
    """Implicit Euler step of the linearized coupled problem.

    ``F0`` is a fluid load vector (integrals against the hat functions),
    ``F1`` the force and ``F2`` the torque on the body. Passing ``operator``
    reuses an already assembled (and factorized) left-hand side.
    """
    if operator is None:
        operator = build_coupled_operator(mesh, dt, mu, beta, rigid, prescribed_rigid, delta_stab)
    dofs = operator.dofs
    load = np.concatenate([np.asarray(F0, dtype=float).ravel(), np.asarray(F1, dtype=float).reshape(2), [float(F2)]])
    lhs_full = operator.mass / operator.dt + operator.stiffness
    momentum = dofs.prolongation.T @ (
        operator.mass @ z_prev.full_velocity() / operator.dt + load - lhs_full @ dofs.offset
    )
    continuity = -(operator.divergence @ dofs.offset)
    return SaddleSystem(operator, np.concatenate([momentum, continuity, [0.0]]))


def solve_coupled(system: SaddleSystem, tol: float = DEFAULT_SOLVER_TOL) -> CoupledState:
    """Direct solve with a few steps of iterative refinement.

    Raises:
        SolverError: If the factorization fails or the relative residual stays above ``tol``.
    """
    operator = system.operator
    rhs = system.rhs
    scale = np.linalg.norm(rhs)
    if scale == 0.0:
        solution = np.zeros_like(rhs)
    else:
        factor = operator.factor
        solution = factor.solve(rhs)
        residuals = [np.linalg.norm(rhs - operator.matrix @ solution) / scale]
        while residuals[-1] > tol and len(residuals) <= MAX_REFINEMENT_STEPS:
            logger.warning("refining saddle-point solve, residual %.3e", residuals[-1])
            solution = solution + factor.solve(rhs - operator.matrix @ solution)
            residuals.append(np.linalg.norm(rhs - operator.matrix @ solution) / scale)
        if not residuals[-1] <= tol:
            raise SolverError(f"relative residual {residuals[-1]:.3e} exceeds {tol:.1e}", residuals)
        logger.debug("saddle-point residual %.3e", residuals[-1])
    n_free = operator.n_free
    velocity = operator.dofs.expand(solution[:n_free])
    pressure = solution[n_free: n_free + operator.mesh.n_nodes]
    return CoupledState.from_full(velocity, pressure)


def apply_operator_A(z: CoupledState, mesh: Mesh, mu: float, beta: float) -> np.ndarray:
    """Stiffness image ``<A z, v>`` for every full velocity dof ``v``."""
    return full_stiffness_matrix(mesh, float(mu), float(beta)) @ z.full_velocity()


def energy_inner_product(z1: CoupledState, z2: CoupledState, rigid: RigidState, mesh: Mesh) -> float:
    """``int z1_F . z2_F + m xi1 . xi2 + I w1 w2``."""
    fluid = float(z1.z_F.ravel() @ (fluid_mass_matrix(mesh) @ z2.z_F.ravel()))
    return fluid + rigid.m * float(z1.xi @ z2.xi) + rigid.I_moment * z1.w * z2.w


def energy_norm(z: CoupledState, rigid: RigidState, mesh: Mesh) -> float:
    return float(np.sqrt(max(energy_inner_product(z, z, rigid, mesh), 0.0)))


def compatibility_residual(z: CoupledState, mesh: Mesh) -> float:
    """Largest violation of the wall, normal-velocity and divergence constraints."""
    wall = np.abs(z.z_F[mesh.wall_nodes]).max(initial=0.0)
    lever = mesh.nodes[mesh.body_nodes] - mesh.body_center
    body = z.xi + z.w * np.column_stack([-lever[:, 1], lever[:, 0]])
    normal = np.abs(np.einsum("ki,ki->k", z.z_F[mesh.body_nodes] - body, mesh.node_normals)).max(initial=0.0)
    divergence = np.abs(divergence_matrix(mesh) @ z.full_velocity()).max(initial=0.0) / mesh.h_max
    return float(max(wall, normal, divergence))


def project_to_constraints(
    z: CoupledState,
    mesh: Mesh,
    rigid: RigidState,
    delta_stab: float = DEFAULT_DELTA_STAB,
    tol: float = DEFAULT_SOLVER_TOL,
) -> CoupledState:
    """Closest discretely solenoidal, boundary-compatible field with the same body motion."""
    prescribed = (z.xi[0], z.xi[1], z.w)
    operator = build_coupled_operator(mesh, 1.0, 1.0, 0.0, rigid, prescribed, delta_stab, viscous=False)
    system = assemble_coupled_system(
        mesh, 1.0, 1.0, 0.0, rigid, z, np.zeros_like(z.z_F), (0.0, 0.0), 0.0, operator=operator
    )
    projected = solve_coupled(system, tol)
    return CoupledState(projected.z_F, np.zeros(mesh.n_nodes), projected.xi, projected.w)
