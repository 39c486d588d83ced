from typing import Callable

import numpy as np
import pytest

from fixed_point import GeometryConfig, PhysicsConfig, SimulationConfig, TimeConfig, TransformConfig
from geometry import Mesh, generate_annulus_mesh
from transform import RigidState, TransformState


class RotationField:
    """Rigid rotation about ``center``; exact flow is a rotation matrix."""

    def __init__(self, omega: float, center=(0.0, 0.0)):
        self.omega = omega
        self.center = np.asarray(center, dtype=float)

    def evaluate(self, points):
        r = points - self.center
        n = points.shape[0]
        value = self.omega * np.column_stack([-r[:, 1], r[:, 0]])
        grad = np.broadcast_to(np.array([[0.0, -self.omega], [self.omega, 0.0]]), (n, 2, 2)).copy()
        return value, grad, np.zeros((n, 2, 2, 2))


class ExpansionField:
    """``v = alpha * y``; not solenoidal, so volume grows."""

    def __init__(self, alpha: float):
        self.alpha = alpha

    def evaluate(self, points):
        n = points.shape[0]
        grad = np.broadcast_to(self.alpha * np.eye(2), (n, 2, 2)).copy()
        return self.alpha * points, grad, np.zeros((n, 2, 2, 2))


def shear_state(points: np.ndarray, a: float) -> TransformState:
    """Linear shear ``X = (y1 + a y2, y2)``."""
    n = points.shape[0]
    X = np.column_stack([points[:, 0] + a * points[:, 1], points[:, 1]])
    J = np.broadcast_to(np.array([[1.0, a], [0.0, 1.0]]), (n, 2, 2)).copy()
    return TransformState.from_map(X, J, np.zeros((n, 2, 2, 2)))


def parabolic_map(points: np.ndarray, a: float):
    """``X = (y1 + a y2^2, y2)`` with its first and second derivatives."""
    n = points.shape[0]
    X = np.column_stack([points[:, 0] + a * points[:, 1] ** 2, points[:, 1]])
    J = np.zeros((n, 2, 2))
    J[:, 0, 0] = 1.0
    J[:, 0, 1] = 2.0 * a * points[:, 1]
    J[:, 1, 1] = 1.0
    H = np.zeros((n, 2, 2, 2))
    H[:, 0, 1, 1] = 2.0 * a
    return X, J, H


@pytest.fixture
def small_mesh() -> Mesh:
    return generate_annulus_mesh(0.5, 2.0, 8, 32)


@pytest.fixture
def disk() -> RigidState:
    return RigidState.homogeneous_disk(1.0, 0.5, (0.0, 0.0))


@pytest.fixture
def rotation_field() -> Callable[..., RotationField]:
    return RotationField


@pytest.fixture
def make_config() -> Callable[..., SimulationConfig]:
    """Small-mesh config; keyword groups override the section defaults."""

    def factory(geometry=None, physics=None, time=None, transform=None, **sections) -> SimulationConfig:
        geometry_kw = dict(r_body=0.5, r_outer=2.0, n_radial=8, n_angular=32)
        geometry_kw.update(geometry or {})
        time_kw = dict(t_end=0.05, dt=0.01)
        time_kw.update(time or {})
        return SimulationConfig(
            geometry=GeometryConfig(**geometry_kw),
            time=TimeConfig(**time_kw),
            physics=PhysicsConfig(**(physics or {})),
            transform=TransformConfig(**(transform or {})),
            **sections,
        )

    return factory
