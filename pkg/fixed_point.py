"""Per-step Picard iteration and the simulation loop.

Each step is a time window ``[t, t + dt]`` on a fresh annulus mesh around the
current body center. The flow map starts at the identity on it and follows a
carrier field whose body velocity ramps from the start value to the value being
solved for. Inside the window the nonlinear and geometric terms are lagged into
the forcing and the coupled linear problem is solved until the iterates stop
moving.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from diagnostics import gap_distance
from errors import ParameterError, PicardNonConvergenceError, SlipDiskError, TransformDegeneracyError
from fem import (
    at_quadrature,
    body_edge_points,
    circle_normals,
    element_geometry,
    element_gradient,
    interpolate_nodal,
    load_vector,
)
from geometry import Mesh, generate_annulus_mesh
from operators import (
    apply_gradient_minus_G,
    apply_L_minus_laplacian,
    apply_M,
    apply_N,
)
from solver import (
    DEFAULT_DELTA_STAB,
    DEFAULT_SOLVER_TOL,
    CoupledOperator,
    CoupledState,
    assemble_coupled_system,
    build_coupled_operator,
    compatibility_residual,
    energy_inner_product,
    energy_norm,
    full_stiffness_matrix,
    project_to_constraints,
    solve_coupled,
    stabilization_matrix,
)
from transform import (
    CarrierRamp,
    CutoffProfile,
    RigidState,
    TransformState,
    advance_flow_map,
    build_lambda,
    cross2,
    pullback_velocity,
    rotation_matrix,
)

logger = logging.getLogger(__name__)

STOP_END_TIME = "t_end"
STOP_CONTACT = "contact-threshold"
STOP_DEGENERACY = "transform-degeneracy"

COMPATIBILITY_TOL = 1e-10
# Picard loads beyond this mean the iterates have blown up
BLOWUP_LOAD = 1e100
FLUID_DENSITY = 1.0


class _RangeChecked:
    """Configs list their out-of-range values; construction rejects the first one."""

    @staticmethod
    def range_problems(values) -> Iterator[ParameterError]:
        return iter(())

    def __post_init__(self):
        problem = next(self.range_problems(self), None)
        if problem is not None:
            raise problem


@dataclass(frozen=True)
class GeometryConfig(_RangeChecked):
    r_body: float
    r_outer: float
    center_x: float = 0.0
    center_y: float = 0.0
    n_radial: int = 32
    n_angular: int = 64
    grading: float = 0.8

    @staticmethod
    def range_problems(c) -> Iterator[ParameterError]:
        if not c.r_body > 0.0:
            yield ParameterError("r_body", f"must be positive, got {c.r_body}")
        if not c.r_outer > c.r_body:
            yield ParameterError("r_outer", f"must exceed r_body ({c.r_outer} <= {c.r_body})")
        if c.n_radial < 2:
            yield ParameterError("n_radial", f"must be >= 2, got {c.n_radial}")
        if c.n_angular < 8:
            yield ParameterError("n_angular", f"must be >= 8, got {c.n_angular}")
        if not 0.0 < c.grading <= 1.0:
            yield ParameterError("grading", f"must lie in (0, 1], got {c.grading}")
        if c.r_outer - float(np.hypot(c.center_x, c.center_y)) - c.r_body <= 0.0:
            yield ParameterError("center_x", "body circle is not strictly inside the outer circle")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.center_x, self.center_y])

    @property
    def gap(self) -> float:
        return self.r_outer - float(np.hypot(self.center_x, self.center_y)) - self.r_body


@dataclass(frozen=True)
class PhysicsConfig(_RangeChecked):
    mu: float = 1.0
    beta: float = 1.0
    rho_body: float = 1.0
    gravity_x: float = 0.0
    gravity_y: float = 0.0
    force_x: float = 0.0
    force_y: float = 0.0
    torque: float = 0.0
    delta_stab: float = DEFAULT_DELTA_STAB

    @staticmethod
    def range_problems(c) -> Iterator[ParameterError]:
        if not c.mu > 0.0:
            yield ParameterError("mu", f"must be positive, got {c.mu}")
        if not c.beta >= 0.0:
            yield ParameterError("beta", f"must be non-negative, got {c.beta}")
        if not c.rho_body > 0.0:
            yield ParameterError("rho_body", f"must be positive, got {c.rho_body}")
        if not c.delta_stab > 0.0:
            yield ParameterError("delta_stab", f"must be positive, got {c.delta_stab}")

    @property
    def gravity(self) -> np.ndarray:
        return np.array([self.gravity_x, self.gravity_y])


@dataclass(frozen=True)
class InitialConfig(_RangeChecked):
    eta_x: float = 0.0
    eta_y: float = 0.0
    omega: float = 0.0
    swirl: float = 0.0

    @property
    def eta(self) -> np.ndarray:
        return np.array([self.eta_x, self.eta_y])


@dataclass(frozen=True)
class TimeConfig(_RangeChecked):
    t_end: float
    dt: float
    picard_tol: float = 1e-8
    picard_max_iter: int = 30
    solver_tol: float = DEFAULT_SOLVER_TOL

    @staticmethod
    def range_problems(c) -> Iterator[ParameterError]:
        if not c.t_end > 0.0:
            yield ParameterError("t_end", f"must be positive, got {c.t_end}")
        if not c.dt > 0.0:
            yield ParameterError("dt", f"must be positive, got {c.dt}")
        if c.picard_max_iter < 1:
            yield ParameterError("picard_max_iter", f"must be >= 1, got {c.picard_max_iter}")
        if not c.solver_tol > 0.0:
            yield ParameterError("solver_tol", f"must be positive, got {c.solver_tol}")
        elif not c.picard_tol > c.solver_tol:
            yield ParameterError("picard_tol", f"must exceed solver_tol ({c.picard_tol} <= {c.solver_tol})")


@dataclass(frozen=True)
class TransformConfig(_RangeChecked):
    delta0: Optional[float] = None
    tol_vol: float = 1e-5
    cutoff_degree: int = 5

    @staticmethod
    def range_problems(c) -> Iterator[ParameterError]:
        if c.delta0 is not None and not c.delta0 > 0.0:
            yield ParameterError("delta0", f"must be positive, got {c.delta0}")
        if not c.tol_vol > 0.0:
            yield ParameterError("tol_vol", f"must be positive, got {c.tol_vol}")
        if c.cutoff_degree not in (3, 5, 7):
            yield ParameterError("cutoff_degree", f"must be 3, 5 or 7, got {c.cutoff_degree}")


@dataclass(frozen=True)
class OutputConfig(_RangeChecked):
    directory: str = "output"
    trajectory: str = "trajectory.csv"
    snapshot_stride: int = 0

    @staticmethod
    def range_problems(c) -> Iterator[ParameterError]:
        if c.snapshot_stride < 0:
            yield ParameterError("snapshot_stride", f"must be >= 0, got {c.snapshot_stride}")


@dataclass(frozen=True)
class SimulationConfig:
    geometry: GeometryConfig
    time: TimeConfig
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if not self.geometry.gap > 2.0 * self.delta0:
            raise ParameterError(
                "delta0", f"initial gap {self.geometry.gap:.6g} must exceed 2 * delta0 = {2.0 * self.delta0:.6g}"
            )

    @property
    def delta0(self) -> float:
        if self.transform.delta0 is None:
            return 0.1 * self.geometry.r_body
        return self.transform.delta0


@dataclass(frozen=True, eq=False)
class ExternalForcing:
    """Loads in the physical frame: fluid body force per node, force and torque on the body."""

    fluid: Optional[np.ndarray] = None
    force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    torque: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "force", np.array(self.force, dtype=float).reshape(2))
        object.__setattr__(self, "torque", float(self.torque))
        if self.fluid is not None:
            object.__setattr__(self, "fluid", np.array(self.fluid, dtype=float))

    @classmethod
    def from_config(cls, cfg: SimulationConfig, rigid: RigidState) -> "ExternalForcing":
        """Constant loads; gravity acts on the body through its excess over displaced fluid."""
        physics = cfg.physics
        displaced = FLUID_DENSITY * np.pi * cfg.geometry.r_body**2
        force = (rigid.m - displaced) * physics.gravity + np.array([physics.force_x, physics.force_y])
        return cls(fluid=None, force=force, torque=physics.torque)

    def power(self, z: CoupledState, mesh: Mesh) -> float:
        """Rate of work on a physical-frame state."""
        work = float(self.force @ z.xi) + self.torque * z.w
        if self.fluid is not None:
            work += float(np.sum(self.fluid_load(mesh, np.eye(2)) * z.z_F))
        return work

    def fluid_load(self, mesh: Mesh, J_Y: np.ndarray) -> np.ndarray:
        if self.fluid is None:
            return np.zeros((mesh.n_nodes, 2))
        density = np.einsum("...ij,nj->ni", J_Y, self.fluid)
        return load_vector(mesh, element_geometry(mesh), at_quadrature(mesh, density))


@dataclass(frozen=True)
class TrajectoryRecord:
    t: float
    x_c: Tuple[float, float]
    theta: float
    eta: Tuple[float, float]
    omega: float
    gap: float
    energy: float
    dissipation: float
    picard_iters: int
    picard_residual: float
    detJ_min: float
    detJ_max: float
    force: Tuple[float, float] = (0.0, 0.0)
    external_power: float = 0.0
    window_energy_start: float = 0.0
    window_energy_end: float = 0.0
    increment: float = 0.0
    stabilization: float = 0.0
    work: float = 0.0


@dataclass(frozen=True)
class PicardStats:
    residuals: Tuple[float, ...]
    load: np.ndarray = field(repr=False, compare=False, default_factory=lambda: np.zeros(0))

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def ratios(self, floor: float = 1e-13) -> List[float]:
        """Successive residual ratios, skipping denominators at roundoff level."""
        r = self.residuals
        return [r[k + 1] / r[k] for k in range(len(r) - 1) if r[k] > floor]


class PhysicalState(NamedTuple):
    nodes: np.ndarray
    velocity: np.ndarray
    pressure: np.ndarray
    eta: np.ndarray
    omega: float


@dataclass(frozen=True, eq=False)
class Snapshot:
    step: int
    t: float
    mesh: Mesh
    velocity: np.ndarray
    pressure: np.ndarray
    det_J: np.ndarray


@dataclass(eq=False)
class SimulationResult:
    records: List[TrajectoryRecord]
    stop_reason: str
    mesh: Mesh
    state: CoupledState
    rigid: RigidState
    snapshots: List[Snapshot] = field(default_factory=list)
    stop_detail: str = ""


def _along_body_edges(mesh: Mesh, edges: np.ndarray, s: np.ndarray, nodal: np.ndarray) -> np.ndarray:
    ends = mesh.boundary_edges[edges]
    return (
        np.einsum("eq,e...->eq...", 1.0 - s, nodal[ends[:, 0]])
        + np.einsum("eq,e...->eq...", s, nodal[ends[:, 1]])
    )


def stress_correction(
    hat: CoupledState, state: TransformState, rigid: RigidState, mesh: Mesh, mu: float
) -> Tuple[np.ndarray, float]:
    """Force and torque of ``(T - Q^T T_phys Q) n`` on the body circle.

    ``T`` is the stress of the reference fields; ``T_phys`` is the stress of
    the mapped velocity ``J_X z``, rotated back to the body frame by ``Q``.
    """
    edges, s, points, weights = body_edge_points(mesh)
    grad = element_gradient(mesh, element_geometry(mesh), hat.z_F)[mesh.edge_triangles[edges]]
    z_q = _along_body_edges(mesh, edges, s, hat.z_F)
    q_q = _along_body_edges(mesh, edges, s, hat.q_F)
    J = _along_body_edges(mesh, edges, s, state.J_X)
    H = _along_body_edges(mesh, edges, s, state.H_X)
    J_Y = _along_body_edges(mesh, edges, s, state.J_Y)
    Q = rigid.rotation
    eye = np.eye(2)

    strain = grad + grad.transpose(0, 2, 1)
    reference = mu * strain[:, None] - q_q[..., None, None] * eye
    mapped = np.einsum("eqkl,elj->eqkj", J, grad) + np.einsum("eqklj,eql->eqkj", H, z_q)
    physical_grad = np.einsum("eqkj,eqjm->eqkm", mapped, J_Y)
    physical = mu * (physical_grad + physical_grad.transpose(0, 1, 3, 2)) - q_q[..., None, None] * eye
    body_frame = np.einsum("ki,eqkl,lj->eqij", Q, physical, Q)

    normals = circle_normals(points, mesh.body_center)
    traction = np.einsum("eqij,eqj->eqi", reference - body_frame, normals)
    lever = points - mesh.body_center
    force = np.einsum("eq,eqi->i", weights, traction)
    torque = float(np.einsum("eq,eq->", weights, lever[..., 0] * traction[..., 1] - lever[..., 1] * traction[..., 0]))
    return force, torque


def compute_forcing(
    hat: CoupledState,
    state: TransformState,
    rigid: RigidState,
    external: ExternalForcing,
    mesh: Mesh,
    mu: float,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Right-hand side of the linearized step built from the previous iterate.

    Args:
        hat: Previous Picard iterate (window-frame velocity and pressure).
        state: Flow map at the end of the window.
        rigid: Window rigid state; ``rigid.rotation`` is the body rotation ``Q``.
        external: Physical-frame loads.
        mesh: Window reference mesh.
        mu: Viscosity.

    Returns:
        ``(F0, F1, F2)``: fluid load vector ``(N, 2)``, body force and torque.
    """
    F0 = (
        -apply_M(hat.z_F, state, mesh)
        + mu * apply_L_minus_laplacian(hat.z_F, state, mesh)
        + apply_gradient_minus_G(hat.q_F, state, mesh)
        - apply_N(hat.z_F, state, mesh)
        + external.fluid_load(mesh, state.J_Y)
    )
    force, torque = stress_correction(hat, state, rigid, mesh, mu)
    F1 = rigid.rotation.T @ external.force + rigid.m * cross2(hat.w, hat.xi) + force
    F2 = external.torque + torque
    return F0, F1, F2


WindowRemap = Callable[[CoupledState], Tuple[TransformState, RigidState]]


def advance_time_step(
    prev: CoupledState,
    state: Optional[TransformState],
    rigid: RigidState,
    cfg: SimulationConfig,
    t: float,
    mesh: Mesh,
    external: Optional[ExternalForcing] = None,
    dt: Optional[float] = None,
    operator: Optional[CoupledOperator] = None,
    remap: Optional[WindowRemap] = None,
) -> Tuple[CoupledState, PicardStats]:
    """Picard iteration for one implicit Euler step ending at ``t + dt``.

    Args:
        prev: Solution at ``t`` on the window mesh.
        state: Flow map over the window; ignored when ``remap`` is given.
        rigid: Window rigid state; ignored when ``remap`` is given.
        cfg: Simulation parameters.
        t: Window start.
        mesh: Window reference mesh.
        external: Physical-frame loads.
        dt: Window length, ``cfg.time.dt`` when omitted.
        operator: Prefactored left-hand side to reuse.
        remap: Rebuilds the flow map and window rigid state from an iterate,
            so the carrier follows the body velocity being solved for.

    Raises:
        PicardNonConvergenceError: If ``picard_max_iter`` iterates do not meet
            ``picard_tol`` or an iterate blows up.
        TransformDegeneracyError: If ``remap`` loses volume preservation.
    """
    physics = cfg.physics
    dt = cfg.time.dt if dt is None else dt
    external = ExternalForcing() if external is None else external
    if operator is None:
        operator = build_coupled_operator(
            mesh, dt, physics.mu, physics.beta, rigid, delta_stab=physics.delta_stab
        )

    hat = prev
    residuals: List[float] = []
    for _ in range(cfg.time.picard_max_iter):
        if remap is not None:
            state, rigid = remap(hat)
        F0, F1, F2 = compute_forcing(hat, state, rigid, external, mesh, physics.mu)
        load = np.concatenate([F0.ravel(), F1, [F2]])
        if not np.all(np.isfinite(load)) or np.abs(load).max() > BLOWUP_LOAD:
            raise PicardNonConvergenceError(residuals, dt)
        system = assemble_coupled_system(
            mesh, dt, physics.mu, physics.beta, rigid, prev, F0, F1, F2, operator=operator
        )
        z = solve_coupled(system, cfg.time.solver_tol)
        size = energy_norm(z, rigid, mesh)
        residual = energy_norm(z - hat, rigid, mesh) / (1.0 + size)
        if not np.isfinite(residual):
            raise PicardNonConvergenceError(residuals, dt)
        residuals.append(residual)
        logger.debug("t=%.6g picard %d residual %.3e", t + dt, len(residuals), residual)
        hat = z
        if residual <= cfg.time.picard_tol:
            return z, PicardStats(tuple(residuals), load)
    raise PicardNonConvergenceError(residuals, dt)


def reconstruct_physical(
    z: CoupledState,
    state: TransformState,
    rigid: RigidState,
    gravity: Sequence[float] = (0.0, 0.0),
) -> PhysicalState:
    """Map a window-frame solution back to physical fields at ``X``.

    Pressure is returned with the hydrostatic part ``g . x`` added back.
    """
    velocity = pullback_velocity(z.z_F, state)
    pressure = z.q_F + state.X @ np.asarray(gravity, dtype=float)
    return PhysicalState(state.X, velocity, pressure, rigid.rotation @ z.xi, z.w)


def initial_state(cfg: SimulationConfig, mesh: Mesh, rigid: RigidState) -> CoupledState:
    """Carrier-field initial velocity, projected if it is not discretely compatible."""
    cutoff = CutoffProfile.for_gap(
        cfg.geometry.r_body, cfg.delta0, cfg.geometry.gap, cfg.transform.cutoff_degree
    )
    swirl = dataclasses.replace(build_lambda(rigid, cutoff), omega=rigid.omega + cfg.initial.swirl)
    u0, _, _ = swirl.evaluate(mesh.nodes)
    z0 = CoupledState(u0, np.zeros(mesh.n_nodes), rigid.eta, rigid.omega)
    residual = compatibility_residual(z0, mesh)
    if residual > COMPATIBILITY_TOL:
        logger.warning("initial velocity compatibility residual %.3e, projecting", residual)
        z0 = project_to_constraints(z0, mesh, rigid, cfg.physics.delta_stab, cfg.time.solver_tol)
    return z0


def _record(
    t: float,
    rigid: RigidState,
    z: CoupledState,
    mesh: Mesh,
    cfg: SimulationConfig,
    external: ExternalForcing,
    **extra,
) -> TrajectoryRecord:
    if "dissipation" not in extra:
        velocity = z.full_velocity()
        stiffness = full_stiffness_matrix(mesh, cfg.physics.mu, cfg.physics.beta)
        extra["dissipation"] = float(velocity @ (stiffness @ velocity))
    gap = gap_distance(rigid, cfg.geometry.r_body, cfg.geometry.r_outer)
    extra.setdefault("picard_iters", 0)
    extra.setdefault("picard_residual", 0.0)
    extra.setdefault("detJ_min", 1.0)
    extra.setdefault("detJ_max", 1.0)
    return TrajectoryRecord(
        t=t,
        x_c=tuple(rigid.x_c),
        theta=rigid.theta,
        eta=tuple(rigid.eta),
        omega=rigid.omega,
        gap=gap.value,
        energy=0.5 * energy_inner_product(z, z, rigid, mesh),
        external_power=external.power(z, mesh),
        **extra,
    )


def check_moved_mesh(mesh: Mesh) -> None:
    """Reject a mesh on which the flow map has turned a triangle inside out.

    Raises:
        TransformDegeneracyError: Naming a vertex of the worst triangle and its
            doubled signed area.
    """
    p = mesh.nodes[mesh.triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    doubled = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    worst = int(np.argmin(doubled))
    if doubled[worst] <= 0.0:
        flipped = int(np.count_nonzero(doubled <= 0.0))
        raise TransformDegeneracyError(
            f"flow map inverted {flipped} triangle(s)", int(mesh.triangles[worst, 0]), float(doubled[worst])
        )


def transfer_state(source: Mesh, physical: PhysicalState, pressure: np.ndarray, target: Mesh) -> CoupledState:
    """Carry the end-of-window fields from the moved mesh onto ``target``.

    Velocity on the wall is reset to zero.
    """
    velocity = interpolate_nodal(source, physical.velocity, target.nodes)
    velocity[target.wall_nodes] = 0.0
    q = interpolate_nodal(source, pressure, target.nodes)
    return CoupledState(velocity, q, physical.eta, physical.omega)


def simulate(cfg: SimulationConfig, log_every: int = 0) -> SimulationResult:
    """Run the coupled simulation from ``t = 0`` to ``t_end``.

    Every window starts on a fresh annulus mesh around the current body
    center; the fields of the previous window are interpolated onto it.
    Stops early when the gap falls to ``delta0`` or the flow map degenerates;
    ``SimulationResult.stop_reason`` names the reason. Other errors propagate
    with ``step`` set.
    """
    geometry, physics = cfg.geometry, cfg.physics
    mesh = _annulus(geometry, geometry.center)
    logger.info(
        "annulus mesh: %d nodes, %d triangles, h_max=%.4g", mesh.n_nodes, mesh.n_triangles, mesh.h_max
    )
    rigid = RigidState.homogeneous_disk(
        physics.rho_body, geometry.r_body, geometry.center, cfg.initial.eta, cfg.initial.omega
    )
    external = ExternalForcing.from_config(cfg, rigid)
    z = initial_state(cfg, mesh, rigid)
    delta0 = cfg.delta0
    stride = cfg.output.snapshot_stride

    records = [_record(0.0, rigid, z, mesh, cfg, external)]
    snapshots: List[Snapshot] = []
    if stride:
        snapshots.append(_snapshot(0, 0.0, mesh, z, physics.gravity, np.ones(mesh.n_nodes)))

    t = 0.0
    step = 0
    stop_reason, stop_detail = STOP_END_TIME, ""
    dt_nominal = cfg.time.dt
    while t < cfg.time.t_end - 1e-9 * dt_nominal:
        dt = min(dt_nominal, cfg.time.t_end - t)
        gap = gap_distance(rigid, geometry.r_body, geometry.r_outer).value
        remap = functools.partial(window_map, mesh, rigid, gap, cfg, t, dt)
        try:
            z_new, stats = advance_time_step(z, None, rigid, cfg, t, mesh, external, dt, remap=remap)
            state, window = remap(z_new)
            physical = reconstruct_physical(z_new, state, window)
            next_rigid = rigid.advanced(dt, physical.eta, physical.omega)
            moved = mesh.moved(state.X, next_rigid.x_c)
            check_moved_mesh(moved)
        except TransformDegeneracyError as exc:
            exc.step = step + 1
            logger.warning("stopping: %s", exc)
            stop_reason, stop_detail = STOP_DEGENERACY, str(exc)
            break
        except SlipDiskError as exc:
            exc.step = step + 1
            raise

        window_start = 0.5 * energy_inner_product(z, z, window, mesh)
        window_end = 0.5 * energy_inner_product(z_new, z_new, window, mesh)
        jump = z_new - z
        increment = 0.5 * energy_inner_product(jump, jump, window, mesh) / dt
        velocity = z_new.full_velocity()
        dissipation = float(velocity @ (full_stiffness_matrix(mesh, physics.mu, physics.beta) @ velocity))
        stab = float(z_new.q_F @ (stabilization_matrix(mesh, physics.mu, physics.delta_stab) @ z_new.q_F))
        det_J = state.det_J
        force = physics_force(next_rigid, rigid, external, dt)

        next_gap = gap_distance(next_rigid, geometry.r_body, geometry.r_outer).value
        if next_gap <= delta0:
            logger.info("stopping at t=%.6g: gap %.6g <= delta0 %.6g", t + dt, next_gap, delta0)
            stop_reason = STOP_CONTACT
            break

        t += dt
        step += 1
        next_mesh = _annulus(geometry, next_rigid.x_c)
        mesh, rigid, z = next_mesh, next_rigid, transfer_state(moved, physical, z_new.q_F, next_mesh)
        record = _record(
            t, rigid, z, mesh, cfg, external,
            picard_iters=stats.iterations,
            picard_residual=stats.final_residual,
            detJ_min=float(det_J.min()),
            detJ_max=float(det_J.max()),
            dissipation=dissipation,
            force=tuple(force),
            window_energy_start=window_start,
            window_energy_end=window_end,
            increment=increment,
            stabilization=stab,
            work=float(stats.load @ velocity),
        )
        records.append(record)
        if stride and step % stride == 0:
            snapshots.append(_snapshot(step, t, mesh, z, physics.gravity, det_J))
        if log_every and step % log_every == 0:
            logger.info(
                "step %d t=%.6g x_c=(%.6g, %.6g) gap=%.6g picard=%d",
                step, t, rigid.x_c[0], rigid.x_c[1], record.gap, stats.iterations,
            )
    else:
        logger.info("reached t_end=%.6g after %d steps", t, step)

    return SimulationResult(records, stop_reason, mesh, z, rigid, snapshots, stop_detail)


def physics_force(after: RigidState, before: RigidState, external: ExternalForcing, dt: float) -> np.ndarray:
    """Hydrodynamic force on the body from its momentum change over one step."""
    return before.m * (after.eta - before.eta) / dt - external.force


def _annulus(geometry: GeometryConfig, center: Sequence[float]) -> Mesh:
    return generate_annulus_mesh(
        geometry.r_body, geometry.r_outer, geometry.n_radial, geometry.n_angular,
        body_center=center, grading=geometry.grading,
    )


def window_map(
    mesh: Mesh,
    rigid: RigidState,
    gap: float,
    cfg: SimulationConfig,
    t: float,
    dt: float,
    hat: CoupledState,
) -> Tuple[TransformState, RigidState]:
    """Flow map of the window and the window rigid state for the iterate ``hat``.

    The body turns by the midpoint angle and its end velocity is ``Q hat.xi``;
    the carrier ramps linearly from the start velocity to it.
    """
    cutoff = CutoffProfile.for_gap(cfg.geometry.r_body, cfg.delta0, gap, cfg.transform.cutoff_degree)
    theta = 0.5 * dt * (rigid.omega + hat.w)
    eta = rotation_matrix(theta) @ hat.xi
    ramp = CarrierRamp(rigid, eta, hat.w, cutoff, t, dt)
    start = TransformState.identity(mesh.nodes, t)
    state = advance_flow_map(start, ramp.at, t, dt, cfg.transform.tol_vol)
    return state, dataclasses.replace(rigid, theta=ramp.rotation_angle, eta=eta, omega=hat.w)


def _snapshot(
    step: int, t: float, mesh: Mesh, z: CoupledState, gravity: np.ndarray, det_J: np.ndarray
) -> Snapshot:
    return Snapshot(step, t, mesh, z.z_F.copy(), z.q_F + mesh.nodes @ gravity, np.array(det_J))
