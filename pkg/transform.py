"""Carrier field, flow map and the geometric coefficients of the transformed equations.

Index conventions for per-node arrays (leading axis is the node):

* ``J_X[n, k, i] = dX_k / dy_i``
* ``H_X[n, l, i, j] = d^2 X_l / dy_i dy_j``
* ``J_Y[n, i, k] = dY_i / dx_k`` evaluated at ``X``
* ``grad_X_dot[n, k, j] = d Xdot_k / dy_j``
* ``gamma[n, k, i, j]`` is the Christoffel symbol with upper index ``k``
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial

from errors import ParameterError, TransformDegeneracyError

logger = logging.getLogger(__name__)

DEFAULT_TOL_VOL = 1e-5
SINGULAR_DET = 1e-14

# smoothstep polynomials on [0, 1], ascending coefficients
SMOOTHSTEP_COEFFICIENTS = {
    3: (0.0, 0.0, 3.0, -2.0),
    5: (0.0, 0.0, 0.0, 10.0, -15.0, 6.0),
    7: (0.0, 0.0, 0.0, 0.0, 35.0, -84.0, 70.0, -20.0),
}

# classical Runge-Kutta tableau
RK4_NODES = (0.0, 0.5, 0.5, 1.0)
RK4_WEIGHTS = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)

_PERP = np.array([[0.0, 1.0], [-1.0, 0.0]])

FieldDerivatives = Tuple[np.ndarray, np.ndarray, np.ndarray]


class VelocityField(Protocol):
    def evaluate(self, points: np.ndarray) -> FieldDerivatives:
        """Value ``(n, 2)``, gradient ``[n, a, b] = d_b v_a`` and Hessian ``[n, a, b, c]``."""


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def cross2(scalar: float, vector: np.ndarray) -> np.ndarray:
    """In-plane ``w x v`` for an out-of-plane scalar ``w``."""
    vector = np.asarray(vector, dtype=float)
    return scalar * np.stack([-vector[..., 1], vector[..., 0]], axis=-1)


@dataclass(frozen=True, eq=False)
class RigidState:
    """Body velocity, pose and inertia."""

    eta: np.ndarray
    omega: float
    theta: float
    x_c: np.ndarray
    m: float
    I_moment: float

    def __post_init__(self):
        object.__setattr__(self, "eta", np.array(self.eta, dtype=float).reshape(2))
        object.__setattr__(self, "x_c", np.array(self.x_c, dtype=float).reshape(2))
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "theta", float(self.theta))
        if not self.m > 0.0:
            raise ParameterError("m", f"mass must be positive, got {self.m}")
        if not self.I_moment > 0.0:
            raise ParameterError("I_moment", f"moment of inertia must be positive, got {self.I_moment}")

    @classmethod
    def homogeneous_disk(
        cls,
        rho_body: float,
        r_body: float,
        x_c: Sequence[float],
        eta: Sequence[float] = (0.0, 0.0),
        omega: float = 0.0,
        theta: float = 0.0,
    ) -> "RigidState":
        m = rho_body * np.pi * r_body**2
        return cls(eta=eta, omega=omega, theta=theta, x_c=x_c, m=m, I_moment=0.5 * m * r_body**2)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.theta)

    def advanced(self, dt: float, eta: Sequence[float], omega: float) -> "RigidState":
        """Pose after ``dt`` by the midpoint of the current and the new velocity.

        The new velocity becomes the current one.
        """
        eta = np.asarray(eta, dtype=float)
        return dataclasses.replace(
            self,
            x_c=self.x_c + 0.5 * dt * (self.eta + eta),
            theta=self.theta + 0.5 * dt * (self.omega + float(omega)),
            eta=eta,
            omega=omega,
        )


@dataclass(frozen=True)
class CutoffProfile:
    """Radial cutoff: 1 inside ``inner_radius``, 0 outside ``outer_radius``.

    The transition is a smoothstep in the squared distance to the body center.
    """

    delta0: float
    inner_radius: float
    outer_radius: float
    degree: int = 5

    def __post_init__(self):
        if not self.delta0 > 0.0:
            raise ParameterError("delta0", f"must be positive, got {self.delta0}")
        if not 0.0 < self.inner_radius < self.outer_radius:
            raise ParameterError(
                "outer_radius",
                f"transition band [{self.inner_radius}, {self.outer_radius}] is empty",
            )
        if self.degree not in SMOOTHSTEP_COEFFICIENTS:
            raise ParameterError("degree", f"must be one of {sorted(SMOOTHSTEP_COEFFICIENTS)}")

    @classmethod
    def for_gap(cls, r_body: float, delta0: float, gap: float, degree: int = 5) -> "CutoffProfile":
        """Band from ``delta0/4`` off the body to ``delta0/2`` short of the wall."""
        if gap <= delta0:
            raise ParameterError("gap", f"gap {gap} does not exceed delta0 {delta0}")
        return cls(
            delta0=delta0,
            inner_radius=r_body + 0.25 * delta0,
            outer_radius=r_body + gap - 0.5 * delta0,
            degree=degree,
        )

    @cached_property
    def _smoothstep(self) -> Tuple[Polynomial, Polynomial, Polynomial, Polynomial]:
        step = Polynomial(SMOOTHSTEP_COEFFICIENTS[self.degree])
        return step, step.deriv(1), step.deriv(2), step.deriv(3)

    def derivatives(self, squared_distance: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Cutoff and its first three derivatives with respect to the squared distance."""
        span = self.outer_radius**2 - self.inner_radius**2
        t = (squared_distance - self.inner_radius**2) / span
        inside = t <= 0.0
        outside = t >= 1.0
        band = ~(inside | outside)
        step, d1, d2, d3 = self._smoothstep

        chi = np.where(inside, 1.0, 0.0)
        chi_1 = np.zeros_like(t)
        chi_2 = np.zeros_like(t)
        chi_3 = np.zeros_like(t)
        tb = t[band]
        chi[band] = 1.0 - step(tb)
        chi_1[band] = -d1(tb) / span
        chi_2[band] = -d2(tb) / span**2
        chi_3[band] = -d3(tb) / span**3
        return chi, chi_1, chi_2, chi_3


@dataclass(frozen=True, eq=False)
class CarrierField:
    """Solenoidal extension of the rigid body velocity into the fluid.

    The field is the perpendicular gradient of ``chi * psi`` where ``psi`` is
    the stream function of the rigid motion about ``center``.
    """

    eta: np.ndarray
    omega: float
    center: np.ndarray
    cutoff: CutoffProfile

    def translated(self, offset: Sequence[float]) -> "CarrierField":
        return dataclasses.replace(self, center=self.center + np.asarray(offset, dtype=float))

    def evaluate(self, points: np.ndarray) -> FieldDerivatives:
        r = np.asarray(points, dtype=float) - self.center
        s = np.einsum("ni,ni->n", r, r)
        chi, c1, c2, c3 = self.cutoff.derivatives(s)
        eye = np.eye(2)

        dchi = 2.0 * c1[:, None] * r
        ddchi = 4.0 * c2[:, None, None] * np.einsum("ni,nj->nij", r, r) + 2.0 * c1[:, None, None] * eye
        rd = np.einsum("ni,jk->nijk", r, eye)
        dddchi = (
            8.0 * c3[:, None, None, None] * np.einsum("ni,nj,nk->nijk", r, r, r)
            + 4.0 * c2[:, None, None, None]
            * (rd.transpose(0, 2, 3, 1) + rd.transpose(0, 2, 1, 3) + rd)
        )

        eta1, eta2 = self.eta
        w = self.omega
        psi = eta1 * r[:, 1] - eta2 * r[:, 0] - 0.5 * w * s
        dpsi = np.column_stack([-eta2 - w * r[:, 0], eta1 - w * r[:, 1]])
        ddpsi = -w * eye

        dphi = dchi * psi[:, None] + chi[:, None] * dpsi
        cross = np.einsum("ni,nj->nij", dchi, dpsi)
        ddphi = ddchi * psi[:, None, None] + cross + cross.transpose(0, 2, 1) + chi[:, None, None] * ddpsi
        mixed = np.einsum("nij,nk->nijk", ddchi, dpsi)
        curvature = np.einsum("ni,jk->nijk", dchi, ddpsi)
        dddphi = (
            dddchi * psi[:, None, None, None]
            + mixed + mixed.transpose(0, 1, 3, 2) + mixed.transpose(0, 3, 2, 1)
            + curvature + curvature.transpose(0, 2, 1, 3) + curvature.transpose(0, 2, 3, 1)
        )

        value = np.einsum("ab,nb->na", _PERP, dphi)
        grad = np.einsum("ab,nbj->naj", _PERP, ddphi)
        hess = np.einsum("ab,nbjk->najk", _PERP, dddphi)
        return value, grad, hess


def build_lambda(rigid: RigidState, cutoff: CutoffProfile) -> CarrierField:
    """Carrier field of the body's current velocity around its current center."""
    return CarrierField(eta=rigid.eta.copy(), omega=rigid.omega, center=rigid.x_c.copy(), cutoff=cutoff)


@dataclass(frozen=True, eq=False)
class CarrierRamp:
    """Carrier field over ``[t0, t0 + dt]`` whose body velocity changes linearly.

    The velocity goes from ``start``'s to ``(eta_end, omega_end)``; the center
    follows the integrated translation, so after ``dt`` it has moved by the
    midpoint velocity times ``dt``.
    """

    start: RigidState
    eta_end: np.ndarray
    omega_end: float
    cutoff: CutoffProfile
    t0: float
    dt: float

    def at(self, s: float) -> CarrierField:
        tau = s - self.t0
        fraction = tau / self.dt
        eta0 = self.start.eta
        change = np.asarray(self.eta_end, dtype=float) - eta0
        return CarrierField(
            eta=eta0 + fraction * change,
            omega=self.start.omega + fraction * (self.omega_end - self.start.omega),
            center=self.start.x_c + tau * eta0 + 0.5 * tau * fraction * change,
            cutoff=self.cutoff,
        )

    @property
    def rotation_angle(self) -> float:
        """Body rotation accumulated over the window."""
        return 0.5 * self.dt * (self.start.omega + self.omega_end)


@dataclass(frozen=True, eq=False)
class TransformState:
    """Flow map and everything the transformed operators read from it."""

    X: np.ndarray
    J_X: np.ndarray
    H_X: np.ndarray
    J_Y: np.ndarray
    Y_dot: np.ndarray
    grad_X_dot: np.ndarray
    g_cov: np.ndarray
    g_con: np.ndarray
    gamma: np.ndarray
    time: float = field(default=0.0)

    @property
    def n_nodes(self) -> int:
        return int(self.X.shape[0])

    @property
    def det_J(self) -> np.ndarray:
        return _det(self.J_X)

    @classmethod
    def identity(cls, points: np.ndarray, time: float = 0.0) -> "TransformState":
        points = np.array(points, dtype=float)
        n = points.shape[0]
        return cls.from_map(
            points,
            np.broadcast_to(np.eye(2), (n, 2, 2)).copy(),
            np.zeros((n, 2, 2, 2)),
            time=time,
        )

    @classmethod
    def from_map(
        cls,
        X: np.ndarray,
        J_X: np.ndarray,
        H_X: np.ndarray,
        lam: Optional[np.ndarray] = None,
        lam_grad: Optional[np.ndarray] = None,
        time: float = 0.0,
    ) -> "TransformState":
        """Derive inverse data, metrics and Christoffels from ``X`` and its derivatives.

        Args:
            X: Mapped node positions.
            J_X: First derivatives of the map.
            H_X: Second derivatives of the map.
            lam: Carrier field value at ``X`` (zero when omitted).
            lam_grad: Carrier field gradient at ``X`` (zero when omitted).
            time: Time the map refers to.
        """
        n = X.shape[0]
        J_Y = _inverse(J_X)
        lam = np.zeros((n, 2)) if lam is None else lam
        lam_grad = np.zeros((n, 2, 2)) if lam_grad is None else lam_grad
        g_cov, g_con, gamma = metric_and_christoffel(J_X, H_X, J_Y)
        return cls(
            X=X,
            J_X=J_X,
            H_X=H_X,
            J_Y=J_Y,
            Y_dot=-np.einsum("nik,nk->ni", J_Y, lam),
            grad_X_dot=np.einsum("nkl,nlj->nkj", lam_grad, J_X),
            g_cov=g_cov,
            g_con=g_con,
            gamma=gamma,
            time=time,
        )


def _det(J: np.ndarray) -> np.ndarray:
    return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def _inverse(J: np.ndarray) -> np.ndarray:
    det = _det(J)
    worst = int(np.argmin(np.abs(det)))
    if abs(det[worst]) < SINGULAR_DET:
        raise TransformDegeneracyError("singular flow-map Jacobian", worst, float(det[worst]))
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    inv[:, 1, 1] = J[:, 0, 0]
    return inv / det[:, None, None]


def _flow_rates(field: VelocityField, X: np.ndarray, J: np.ndarray, H: np.ndarray):
    lam, grad, hess = field.evaluate(X)
    dJ = np.einsum("nkl,nli->nki", grad, J)
    dH = np.einsum("nlmp,nmi,npj->nlij", hess, J, J) + np.einsum("nlm,nmij->nlij", grad, H)
    return lam, dJ, dH


def advance_flow_map(
    state: TransformState,
    lambda_at: Callable[[float], VelocityField],
    t: float,
    dt: float,
    tol_vol: float = DEFAULT_TOL_VOL,
) -> TransformState:
    """Integrate the flow map and its variational equations over ``[t, t + dt]``.

    Args:
        state: Map at time ``t``.
        lambda_at: Returns the carrier field at a given time.
        t: Start time.
        dt: Step length.
        tol_vol: Allowed deviation of ``det J_X`` from one.

    Returns:
        The map at ``t + dt`` with all derived coefficients recomputed.

    Raises:
        ParameterError: If ``dt`` is not positive.
        TransformDegeneracyError: If volume preservation is lost.
    """
    if not dt > 0.0:
        raise ParameterError("dt", f"must be positive, got {dt}")
    X, J, H = state.X, state.J_X, state.H_X
    slopes = []
    for stage, c in enumerate(RK4_NODES):
        if stage == 0:
            Xs, Js, Hs = X, J, H
        else:
            kX, kJ, kH = slopes[-1]
            Xs, Js, Hs = X + c * dt * kX, J + c * dt * kJ, H + c * dt * kH
        slopes.append(_flow_rates(lambda_at(t + c * dt), Xs, Js, Hs))

    X_new = X + dt * sum(b * k[0] for b, k in zip(RK4_WEIGHTS, slopes))
    J_new = J + dt * sum(b * k[1] for b, k in zip(RK4_WEIGHTS, slopes))
    H_new = H + dt * sum(b * k[2] for b, k in zip(RK4_WEIGHTS, slopes))
    H_new = 0.5 * (H_new + H_new.transpose(0, 1, 3, 2))

    drift = np.abs(_det(J_new) - 1.0)
    worst = int(np.argmax(drift))
    if drift[worst] > tol_vol:
        raise TransformDegeneracyError("volume preservation lost", worst, float(_det(J_new)[worst]))

    lam, lam_grad, _ = lambda_at(t + dt).evaluate(X_new)
    logger.debug("flow map advanced to t=%.6g, max |det J - 1| = %.3e", t + dt, drift[worst])
    return TransformState.from_map(X_new, J_new, H_new, lam, lam_grad, time=t + dt)


def metric_and_christoffel(
    J_X: np.ndarray, H_X: np.ndarray, J_Y: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Covariant and contravariant metric and the Christoffel symbols ``Y_k,l X_l,ij``.

    Raises:
        TransformDegeneracyError: If any ``J_X`` is singular.
    """
    det = _det(J_X)
    worst = int(np.argmin(np.abs(det)))
    if abs(det[worst]) < SINGULAR_DET:
        raise TransformDegeneracyError("singular flow-map Jacobian", worst, float(det[worst]))
    g_cov = np.einsum("nki,nkj->nij", J_X, J_X)
    g_con = np.einsum("nik,njk->nij", J_Y, J_Y)
    gamma = np.einsum("nkl,nlij->nkij", J_Y, H_X)
    return g_cov, g_con, gamma


def christoffel_from_metric(J_X: np.ndarray, H_X: np.ndarray) -> np.ndarray:
    """Christoffel symbols from metric derivatives ``1/2 g^kl (g_il,j + g_jl,i - g_ij,l)``."""
    g_cov = np.einsum("nki,nkj->nij", J_X, J_X)
    g_inv = np.linalg.inv(g_cov)
    # dg[n, i, l, j] = d_j g_il
    dg = np.einsum("nkij,nkl->nilj", H_X, J_X) + np.einsum("nki,nklj->nilj", J_X, H_X)
    # first_kind[n, i, l, j] = d_j g_il + d_i g_jl - d_l g_ij
    first_kind = dg + np.einsum("njli->nilj", dg) - np.einsum("nijl->nilj", dg)
    return 0.5 * np.einsum("nkl,nilj->nkij", g_inv, first_kind)


def christoffel_discrepancy(J_X: np.ndarray, H_X: np.ndarray, J_Y: np.ndarray) -> float:
    """Largest difference between the direct and the metric Christoffel formulas."""
    _, _, gamma = metric_and_christoffel(J_X, H_X, J_Y)
    return float(np.max(np.abs(gamma - christoffel_from_metric(J_X, H_X)), initial=0.0))


def pushforward_velocity(u_physical: np.ndarray, state: TransformState) -> np.ndarray:
    """Reference-frame velocity ``J_Y u``."""
    return np.einsum("nij,nj->ni", state.J_Y, u_physical)


def pullback_velocity(u_reference: np.ndarray, state: TransformState) -> np.ndarray:
    """Physical velocity ``J_X u`` at the mapped nodes."""
    return np.einsum("nij,nj->ni", state.J_X, u_reference)
