import numpy as np
import pytest

from conftest import ExpansionField, parabolic_map
from errors import ParameterError, TransformDegeneracyError
from transform import (
    CarrierField,
    CarrierRamp,
    CutoffProfile,
    RigidState,
    TransformState,
    advance_flow_map,
    build_lambda,
    christoffel_discrepancy,
    christoffel_from_metric,
    metric_and_christoffel,
    pullback_velocity,
    pushforward_velocity,
    rotation_matrix,
)


@pytest.fixture
def cutoff():
    return CutoffProfile.for_gap(r_body=0.5, delta0=0.05, gap=1.5)


@pytest.fixture
def carrier(cutoff):
    rigid = RigidState.homogeneous_disk(1.0, 0.5, (0.1, -0.2), eta=(0.3, -0.7), omega=1.3)
    return build_lambda(rigid, cutoff)


def _sample_points(rng, n=50):
    radius = rng.uniform(0.5, 2.0, n)
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)]) + np.array([0.1, -0.2])


def test_cutoff_band_limits(cutoff):
    assert cutoff.inner_radius == pytest.approx(0.5125)
    assert cutoff.outer_radius == pytest.approx(1.975)
    chi, *_ = cutoff.derivatives(np.array([0.25, 0.5125**2, 1.975**2, 4.0]))
    np.testing.assert_allclose(chi, [1.0, 1.0, 0.0, 0.0])


@pytest.mark.parametrize("degree", [3, 5, 7])
def test_cutoff_derivatives_match_finite_differences(degree):
    profile = CutoffProfile(delta0=0.1, inner_radius=0.6, outer_radius=1.5, degree=degree)
    s = np.linspace(0.6**2 + 0.05, 1.5**2 - 0.05, 7)
    h = 1e-5
    values = profile.derivatives(s)
    plus = profile.derivatives(s + h)
    minus = profile.derivatives(s - h)
    for k in range(3):
        np.testing.assert_allclose((plus[k] - minus[k]) / (2 * h), values[k + 1], rtol=1e-5, atol=1e-7)


def test_cutoff_rejects_narrow_gap():
    with pytest.raises(ParameterError, match="does not exceed delta0"):
        CutoffProfile.for_gap(0.5, delta0=0.2, gap=0.15)


def test_cutoff_rejects_unknown_degree():
    with pytest.raises(ParameterError) as info:
        CutoffProfile(delta0=0.1, inner_radius=0.6, outer_radius=1.5, degree=4)
    assert info.value.field == "degree"


def test_carrier_is_rigid_near_body(carrier):
    angle = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
    offset = 0.51 * np.column_stack([np.cos(angle), np.sin(angle)])
    value, grad, hess = carrier.evaluate(carrier.center + offset)
    rigid = carrier.eta + carrier.omega * np.column_stack([-offset[:, 1], offset[:, 0]])
    np.testing.assert_allclose(value, rigid, atol=1e-13)
    np.testing.assert_allclose(grad, np.broadcast_to([[0.0, -1.3], [1.3, 0.0]], grad.shape), atol=1e-13)
    np.testing.assert_allclose(hess, 0.0, atol=1e-12)


def test_carrier_vanishes_near_wall(carrier):
    offset = np.array([[1.98, 0.0], [0.0, -1.99], [-1.4, 1.4]])
    value, grad, hess = carrier.evaluate(carrier.center + offset)
    assert np.all(value == 0.0) and np.all(grad == 0.0) and np.all(hess == 0.0)


def test_carrier_is_solenoidal(carrier):
    points = _sample_points(np.random.default_rng(3))
    _, grad, hess = carrier.evaluate(points)
    scale = np.abs(grad).max()
    assert np.abs(np.trace(grad, axis1=1, axis2=2)).max() <= 1e-12 * scale
    assert np.abs(np.einsum("naak->nk", hess)).max() <= 1e-11 * np.abs(hess).max()


def test_carrier_derivatives_match_finite_differences(carrier):
    points = _sample_points(np.random.default_rng(5), 20)
    value, grad, hess = carrier.evaluate(points)
    h = 1e-6
    for b in range(2):
        step = np.zeros(2)
        step[b] = h
        vp, gp, _ = carrier.evaluate(points + step)
        vm, gm, _ = carrier.evaluate(points - step)
        np.testing.assert_allclose((vp - vm) / (2 * h), grad[:, :, b], rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose((gp - gm) / (2 * h), hess[:, :, :, b], rtol=1e-5, atol=1e-6)


def test_translated_carrier_moves_center(carrier):
    moved = carrier.translated((0.5, 0.0))
    np.testing.assert_allclose(moved.center, carrier.center + [0.5, 0.0])
    assert moved.cutoff is carrier.cutoff


def test_rotation_flow_matches_closed_form(rotation_field):
    rng = np.random.default_rng(0)
    points = rng.uniform(-1.0, 1.0, (30, 2))
    field = rotation_field(omega=0.7)
    state = TransformState.identity(points)
    dt = 0.01
    for k in range(100):
        state = advance_flow_map(state, lambda t: field, k * dt, dt)
    R = rotation_matrix(0.7 * 1.0)
    np.testing.assert_allclose(state.X, points @ R.T, atol=1e-8)
    np.testing.assert_allclose(state.J_X, np.broadcast_to(R, state.J_X.shape), atol=1e-8)
    np.testing.assert_allclose(state.H_X, 0.0, atol=1e-12)
    assert state.time == pytest.approx(1.0)


def test_carrier_flow_preserves_volume(small_mesh):
    rigid = RigidState.homogeneous_disk(1.0, 0.5, (0.0, 0.0), eta=(0.0, -0.5), omega=0.4)
    cutoff = CutoffProfile.for_gap(0.5, 0.05, 1.5)
    carrier = build_lambda(rigid, cutoff)
    state = TransformState.identity(small_mesh.nodes)
    lambda_at = lambda t: carrier.translated(t * rigid.eta)  # noqa: E731
    for k in range(5):
        state = advance_flow_map(state, lambda_at, 0.01 * k, 0.01)
    assert np.abs(state.det_J - 1.0).max() <= 1e-6
    np.testing.assert_allclose(state.H_X, state.H_X.transpose(0, 1, 3, 2))


def test_expansion_flow_raises_degeneracy():
    points = np.array([[0.5, 0.0], [0.0, 1.0]])
    with pytest.raises(TransformDegeneracyError) as info:
        advance_flow_map(TransformState.identity(points), lambda t: ExpansionField(0.1), 0.0, 0.1)
    assert info.value.det > 1.0


def test_advance_rejects_nonpositive_dt(rotation_field):
    with pytest.raises(ParameterError, match="dt"):
        advance_flow_map(TransformState.identity(np.zeros((1, 2))), lambda t: rotation_field(1.0), 0.0, 0.0)


def test_identity_metric_and_christoffel():
    n = 4
    J = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    g_cov, g_con, gamma = metric_and_christoffel(J, np.zeros((n, 2, 2, 2)), J)
    np.testing.assert_array_equal(g_cov, J)
    np.testing.assert_array_equal(g_con, J)
    np.testing.assert_array_equal(gamma, 0.0)


def test_christoffel_formulas_agree():
    points = np.random.default_rng(2).uniform(-1.0, 1.0, (25, 2))
    _, J, H = parabolic_map(points, 0.3)
    state = TransformState.from_map(points, J, H)
    assert christoffel_discrepancy(J, H, state.J_Y) <= 1e-8
    # only Gamma^0_11 = 2a is nonzero for this map
    gamma = christoffel_from_metric(J, H)
    np.testing.assert_allclose(gamma[:, 0, 1, 1], 0.6, rtol=1e-12)
    gamma[:, 0, 1, 1] = 0.0
    np.testing.assert_allclose(gamma, 0.0, atol=1e-12)


def test_singular_jacobian_is_rejected():
    J = np.array([[[1.0, 2.0], [0.5, 1.0]]])
    with pytest.raises(TransformDegeneracyError, match="singular"):
        TransformState.from_map(np.zeros((1, 2)), J, np.zeros((1, 2, 2, 2)))


def test_push_and_pull_are_inverse():
    points = np.random.default_rng(4).uniform(-1.0, 1.0, (10, 2))
    X, J, H = parabolic_map(points, -0.4)
    state = TransformState.from_map(X, J, H)
    u = np.random.default_rng(6).standard_normal((10, 2))
    np.testing.assert_allclose(pushforward_velocity(pullback_velocity(u, state), state), u, atol=1e-12)


def test_from_map_time_derivatives():
    points = np.zeros((3, 2))
    J = np.broadcast_to(np.array([[2.0, 0.0], [0.0, 0.5]]), (3, 2, 2)).copy()
    lam = np.tile([1.0, 1.0], (3, 1))
    state = TransformState.from_map(points, J, np.zeros((3, 2, 2, 2)), lam=lam)
    np.testing.assert_allclose(state.Y_dot, np.tile([-0.5, -2.0], (3, 1)))
    np.testing.assert_allclose(state.grad_X_dot, 0.0)


def test_rigid_state_inertia_and_pose():
    rigid = RigidState.homogeneous_disk(1.0, 0.5, (0.0, 0.0), eta=(1.0, 0.0), omega=2.0)
    assert rigid.m == pytest.approx(np.pi * 0.25)
    assert rigid.I_moment == pytest.approx(np.pi * 0.5**4 / 2)
    moved = rigid.advanced(0.1, (0.0, -2.0), 1.0)
    np.testing.assert_allclose(moved.x_c, [0.05, -0.1])
    assert moved.theta == pytest.approx(0.15)
    np.testing.assert_allclose(moved.eta, [0.0, -2.0])
    assert moved.omega == 1.0


def test_carrier_ramp_center_moves_by_midpoint_velocity():
    rigid = RigidState.homogeneous_disk(1.0, 0.5, (0.0, -0.2), eta=(1.0, 0.0), omega=0.5)
    ramp = CarrierRamp(rigid, np.array([0.0, -1.0]), 1.5, CutoffProfile(0.1, 0.6, 1.5), 2.0, 0.1)
    start, middle, end = ramp.at(2.0), ramp.at(2.05), ramp.at(2.1)
    np.testing.assert_allclose(start.center, rigid.x_c)
    np.testing.assert_allclose(start.eta, rigid.eta)
    np.testing.assert_allclose(middle.eta, [0.5, -0.5])
    assert middle.omega == pytest.approx(1.0)
    np.testing.assert_allclose(end.center, [0.05, -0.25])
    np.testing.assert_allclose(end.eta, [0.0, -1.0])
    assert ramp.rotation_angle == pytest.approx(0.1)


def test_ramped_flow_map_carries_body_nodes_to_midpoint_pose():
    rigid = RigidState.homogeneous_disk(1.0, 0.5, (0.0, 0.0), eta=(0.0, -0.4), omega=0.0)
    cutoff = CutoffProfile.for_gap(0.5, 0.1, 1.5)
    ramp = CarrierRamp(rigid, np.array([0.1, -0.5]), 0.2, cutoff, 0.0, 0.05)
    angle = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
    ring = 0.5 * np.column_stack([np.cos(angle), np.sin(angle)])
    state = advance_flow_map(TransformState.identity(ring), ramp.at, 0.0, 0.05)
    center = rigid.x_c + 0.05 * 0.5 * (rigid.eta + np.array([0.1, -0.5]))
    np.testing.assert_allclose(np.linalg.norm(state.X - center, axis=1), 0.5, atol=1e-6)
    turned = np.arctan2(*(state.X[0] - center)[::-1])
    assert turned == pytest.approx(ramp.rotation_angle, abs=1e-6)


def test_rigid_state_rejects_nonpositive_mass():
    with pytest.raises(ParameterError) as info:
        RigidState(eta=(0, 0), omega=0.0, theta=0.0, x_c=(0, 0), m=0.0, I_moment=1.0)
    assert info.value.field == "m"


def test_carrier_field_type():
    field = CarrierField(np.zeros(2), 0.0, np.zeros(2), CutoffProfile(0.1, 0.6, 1.5))
    value, _, _ = field.evaluate(np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(value, 0.0)
