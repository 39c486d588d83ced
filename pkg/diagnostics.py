"""Measurements of energy, dissipation, gap and operator health.

Quadratures here are evaluated from element data directly rather than
through the assembled matrices of ``solver``, so a wrong assembly shows up
as a disagreement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from fem import TRIANGLE_POINTS, TRIANGLE_WEIGHTS, at_quadrature, body_edge_points, element_geometry, element_gradient
from geometry import Mesh, generate_annulus_mesh
from solver import (
    CoupledState,
    apply_operator_A,
    assemble_coupled_system,
    build_coupled_operator,
    build_dof_map,
    full_mass_matrix,
    full_stiffness_matrix,
    solve_coupled,
)
from transform import RigidState, cross2

logger = logging.getLogger(__name__)

OPERATOR_TOLERANCE = 1e-12


class GapDistance(NamedTuple):
    value: float
    contact: bool


def gap_distance(
    rigid: RigidState, r_body: float, r_outer: float, outer_center: Sequence[float] = (0.0, 0.0)
) -> GapDistance:
    """Distance between the body circle and the outer wall; ``contact`` when nonpositive."""
    offset = rigid.x_c - np.asarray(outer_center, dtype=float)
    value = float(r_outer - np.hypot(offset[0], offset[1]) - r_body)
    return GapDistance(value, value <= 0.0)


def kinetic_energy(z: CoupledState, rigid: RigidState, mesh: Mesh) -> float:
    """``1/2 (z, z)`` with the fluid integral taken by triangle quadrature."""
    geometry = element_geometry(mesh)
    u_q = at_quadrature(mesh, z.z_F)
    fluid = np.einsum("t,q,tqi,tqi->", geometry.areas, TRIANGLE_WEIGHTS, u_q, u_q)
    return 0.5 * (fluid + rigid.m * float(z.xi @ z.xi) + rigid.I_moment * z.w**2)


def dissipation_rate(z: CoupledState, mesh: Mesh, mu: float, beta: float) -> float:
    """``2 mu ||D(z_F)||^2 + beta oint |z_F - z_B|^2``."""
    geometry = element_geometry(mesh)
    grad = element_gradient(mesh, geometry, z.z_F)
    strain = 0.5 * (grad + grad.transpose(0, 2, 1))
    viscous = 2.0 * mu * np.einsum("t,tij,tij->", geometry.areas, strain, strain)

    edges, s, points, weights = body_edge_points(mesh)
    ends = mesh.boundary_edges[edges]
    fluid = (1.0 - s)[..., None] * z.z_F[ends[:, 0]][:, None] + s[..., None] * z.z_F[ends[:, 1]][:, None]
    body = z.xi + cross2(z.w, points - mesh.body_center)
    slip = np.einsum("eq,eqi,eqi->", weights, fluid - body, fluid - body)
    return float(viscous + beta * slip)


@dataclass(frozen=True)
class EnergyReport:
    t: float
    kinetic: float
    dissipation_rate: float
    external_power: float
    balance_residual: float


def energy_balance(records: Sequence) -> List[EnergyReport]:
    """One report per completed step.

    The residual is the implicit Euler energy identity of the step's window:
    energy change rate, numerical dissipation, viscous and slip dissipation,
    pressure stabilization and work of the applied loads sum to zero.
    """
    reports = []
    for before, after in zip(records[:-1], records[1:]):
        dt = after.t - before.t
        residual = (
            (after.window_energy_end - after.window_energy_start) / dt
            + after.increment
            + after.dissipation
            + after.stabilization
            - after.work
        )
        reports.append(EnergyReport(after.t, after.energy, after.dissipation, after.external_power, residual))
    return reports


@dataclass(frozen=True)
class OperatorReport:
    symmetry: float
    positivity: float
    energy_identity: float
    n_samples: int
    tolerance: float = OPERATOR_TOLERANCE

    @property
    def ok(self) -> bool:
        return max(self.symmetry, self.positivity, self.energy_identity) <= self.tolerance


def operator_selfcheck(
    mesh: Mesh,
    mu: float,
    beta: float,
    seed: int = 1,
    n_samples: int = 100,
    stiffness: Optional[sparse.spmatrix] = None,
) -> OperatorReport:
    """Symmetry, positivity and energy identity of the stiffness on random states.

    ``stiffness`` replaces the assembled matrix, which lets a caller check
    that a corrupted operator is caught. All violations are relative.
    """
    rng = np.random.default_rng(seed)
    dofs = build_dof_map(mesh)
    K = full_stiffness_matrix(mesh, float(mu), float(beta)) if stiffness is None else sparse.csr_matrix(stiffness)
    norm = float(np.abs(K).max())

    symmetry = positivity = identity = 0.0
    for _ in range(n_samples):
        z = dofs.expand(rng.standard_normal(dofs.n_free))
        v = dofs.expand(rng.standard_normal(dofs.n_free))
        Kz = K @ z
        zKz = float(z @ Kz)
        scale = norm * np.linalg.norm(z) * np.linalg.norm(v)
        symmetry = max(symmetry, abs(float(v @ Kz) - float(z @ (K @ v))) / scale)
        positivity = max(positivity, -zKz / (norm * float(z @ z)))
        state = CoupledState.from_full(z, np.zeros(mesh.n_nodes))
        exact = dissipation_rate(state, mesh, mu, beta)
        identity = max(identity, abs(zKz - exact) / max(abs(exact), np.finfo(float).tiny))

    report = OperatorReport(symmetry, positivity, identity, n_samples)
    logger.info(
        "operator self-check: symmetry %.3e, positivity %.3e, energy identity %.3e",
        symmetry, positivity, identity,
    )
    return report


def rigid_quadratic_form(mesh: Mesh, mu: float, beta: float, xi: Sequence[float], w: float) -> float:
    """``<A z, z>`` for the rigid field ``z_F = xi + w x (y - x_c)`` on every node."""
    xi = np.asarray(xi, dtype=float)
    z_F = xi + cross2(w, mesh.nodes - mesh.body_center)
    z = CoupledState(z_F, np.zeros(mesh.n_nodes), xi, w)
    return float(z.full_velocity() @ apply_operator_A(z, mesh, mu, beta))


def a_priori_ratio(
    z: CoupledState, z_prev: CoupledState, load: np.ndarray, dt: float, rigid: RigidState, mesh: Mesh
) -> float:
    """``||z|| / (||z_prev|| + dt ||load||_*)`` in the energy norm; at most one for one step."""
    mass = full_mass_matrix(mesh, rigid).tocsc()
    znew = z.full_velocity()
    zold = z_prev.full_velocity()
    dual = float(np.sqrt(max(load @ splu(mass).solve(np.asarray(load, dtype=float)), 0.0)))
    bound = np.sqrt(zold @ (mass @ zold)) + dt * dual
    size = np.sqrt(znew @ (mass @ znew))
    return float(size / bound) if bound > 0.0 else 0.0


class DragHistory(NamedTuple):
    gaps: np.ndarray
    drag: np.ndarray
    resistance: np.ndarray
    monotonic: bool


def drag_history(records: Sequence, fraction: float = 0.2, direction: Sequence[float] = (0.0, 1.0)) -> DragHistory:
    """Fluid force along ``direction`` over the last ``fraction`` of the run.

    ``resistance`` is that force per unit speed along ``direction``;
    ``monotonic`` reports whether it grows as the gap closes.
    """
    tail = list(records[1:])
    tail = tail[len(tail) - max(int(round(fraction * len(tail))), 1):] if tail else []
    gaps = np.array([r.gap for r in tail])
    drag = np.array([float(np.dot(r.force, direction)) for r in tail])
    speed = np.abs([float(np.dot(r.eta, direction)) for r in tail])
    resistance = np.full(len(tail), np.inf)
    np.divide(drag, speed, out=resistance, where=speed > 0.0)
    monotonic = bool(len(drag) > 1 and np.all(np.isfinite(resistance)) and np.all(np.diff(resistance) > 0.0))
    return DragHistory(gaps, drag, resistance, monotonic)


@dataclass(frozen=True)
class TaylorCouetteSolution:
    """Steady flow between a disk spinning at ``w0`` with Navier slip and a fixed no-slip wall.

    ``u_theta(r) = A r + B / r`` with zero pressure.
    """

    r_body: float
    r_outer: float
    mu: float
    beta: float
    w0: float

    @property
    def B(self) -> float:
        rb, R = self.r_body, self.r_outer
        return self.beta * self.w0 * rb / (2.0 * self.mu / rb**2 + self.beta / rb - self.beta * rb / R**2)

    @property
    def A(self) -> float:
        return -self.B / self.r_outer**2

    def azimuthal(self, r: np.ndarray) -> np.ndarray:
        return self.A * r + self.B / r

    def velocity(self, points: np.ndarray, center: Sequence[float] = (0.0, 0.0)) -> np.ndarray:
        offset = np.asarray(points, dtype=float) - np.asarray(center, dtype=float)
        r = np.linalg.norm(offset, axis=-1)
        return (self.azimuthal(r) / r)[..., None] * np.stack([-offset[..., 1], offset[..., 0]], axis=-1)


class ConvergenceRow(NamedTuple):
    level: int
    n_radial: int
    n_angular: int
    h: float
    error: float
    order: float


def l2_error(mesh: Mesh, u_h: np.ndarray, solution: TaylorCouetteSolution) -> float:
    geometry = element_geometry(mesh)
    points = np.einsum("qa,tai->tqi", TRIANGLE_POINTS, mesh.nodes[mesh.triangles])
    diff = at_quadrature(mesh, u_h) - solution.velocity(points, mesh.body_center)
    return float(np.sqrt(np.einsum("t,q,tqi,tqi->", geometry.areas, TRIANGLE_WEIGHTS, diff, diff)))


def solve_taylor_couette(mesh: Mesh, solution: TaylorCouetteSolution, steady_dt: float = 1e12) -> CoupledState:
    """Steady solve with the body held spinning at ``w0``."""
    rigid = RigidState.homogeneous_disk(1.0, mesh.r_body, mesh.body_center)
    prescribed = (0.0, 0.0, solution.w0)
    operator = build_coupled_operator(
        mesh, steady_dt, solution.mu, solution.beta, rigid, prescribed_rigid=prescribed
    )
    zero = CoupledState.zeros(mesh.n_nodes)
    system = assemble_coupled_system(
        mesh, steady_dt, solution.mu, solution.beta, rigid, zero,
        np.zeros((mesh.n_nodes, 2)), (0.0, 0.0), 0.0, operator=operator,
    )
    return solve_coupled(system)


def taylor_couette_study(
    levels: int = 3,
    r_body: float = 0.5,
    r_outer: float = 2.0,
    mu: float = 1.0,
    beta: float = 1.0,
    w0: float = 1.0,
    base: Sequence[int] = (8, 32),
    grading: float = 0.8,
) -> List[ConvergenceRow]:
    """L2 errors on nested meshes; each level halves every layer and every arc."""
    solution = TaylorCouetteSolution(r_body, r_outer, mu, beta, w0)
    rows: List[ConvergenceRow] = []
    for level in range(levels):
        n_radial, n_angular = base[0] * 2**level, base[1] * 2**level
        mesh = generate_annulus_mesh(
            r_body, r_outer, n_radial, n_angular, grading=grading ** (1.0 / 2**level)
        )
        error = l2_error(mesh, solve_taylor_couette(mesh, solution).z_F, solution)
        order = float("nan")
        if rows:
            order = float(np.log(rows[-1].error / error) / np.log(rows[-1].h / mesh.h_max))
        rows.append(ConvergenceRow(level, n_radial, n_angular, mesh.h_max, error, order))
        logger.info("Taylor-Couette level %d: h=%.4g error=%.4e order=%.3f", level, mesh.h_max, error, order)
    return rows
