import numpy as np
import pytest

from diagnostics import (
    TaylorCouetteSolution,
    a_priori_ratio,
    drag_history,
    energy_balance,
    gap_distance,
    kinetic_energy,
    operator_selfcheck,
    rigid_quadratic_form,
    taylor_couette_study,
)
from fixed_point import TrajectoryRecord
from solver import (
    CoupledState,
    assemble_coupled_system,
    build_dof_map,
    energy_inner_product,
    full_stiffness_matrix,
    solve_coupled,
)
from transform import RigidState


def _record(t, **fields):
    base = dict(
        t=t, x_c=(0.0, 0.0), theta=0.0, eta=(0.0, 0.0), omega=0.0, gap=1.5, energy=0.0, dissipation=0.0,
        picard_iters=1, picard_residual=0.0, detJ_min=1.0, detJ_max=1.0,
    )
    base.update(fields)
    return TrajectoryRecord(**base)


def _random_state(mesh, seed):
    dofs = build_dof_map(mesh)
    full = dofs.expand(np.random.default_rng(seed).standard_normal(dofs.n_free))
    return CoupledState.from_full(full, np.zeros(mesh.n_nodes))


@pytest.mark.parametrize(
    "center, value, contact",
    [((0.0, 0.0), 1.5, False), ((0.0, -1.0), 0.5, False), ((0.0, -1.6), -0.1, True)],
)
def test_gap_distance_examples(center, value, contact):
    gap = gap_distance(RigidState.homogeneous_disk(1.0, 0.5, center), 0.5, 2.0)
    assert gap.value == pytest.approx(value)
    assert gap.contact is contact


@pytest.mark.parametrize("beta", [0.0, 1.0, 50.0])
def test_operator_selfcheck_passes(small_mesh, beta):
    report = operator_selfcheck(small_mesh, 1.0, beta, n_samples=20)
    assert report.ok, report
    assert report.n_samples == 20


def test_operator_selfcheck_catches_asymmetry(small_mesh):
    stiffness = full_stiffness_matrix(small_mesh, 1.0, 1.0)
    K = stiffness.tolil()
    K[0, 2] += 1e-3 * abs(stiffness).max()
    report = operator_selfcheck(small_mesh, 1.0, 1.0, n_samples=10, stiffness=K)
    assert not report.ok
    assert report.symmetry > 1e-6


def test_rigid_motion_is_not_dissipated(small_mesh):
    assert rigid_quadratic_form(small_mesh, 2.0, 10.0, (0.4, -0.1), 0.7) == pytest.approx(0.0, abs=1e-10)


def test_kinetic_energy_matches_inner_product(small_mesh, disk):
    z = _random_state(small_mesh, 11)
    assert kinetic_energy(z, disk, small_mesh) == pytest.approx(
        0.5 * energy_inner_product(z, z, disk, small_mesh), rel=1e-12
    )


def test_energy_balance_residual():
    records = [
        _record(0.0),
        _record(
            0.1, window_energy_start=1.0, window_energy_end=0.9, increment=0.05, dissipation=0.4,
            stabilization=0.1, work=0.2,
        ),
    ]
    (report,) = energy_balance(records)
    assert report.t == 0.1
    assert report.balance_residual == pytest.approx(-1.0 + 0.05 + 0.4 + 0.1 - 0.2)


def test_energy_balance_needs_two_records():
    assert energy_balance([_record(0.0)]) == []


def test_single_step_obeys_a_priori_bound(small_mesh, disk):
    rng = np.random.default_rng(8)
    z_prev = _random_state(small_mesh, 9)
    F0 = rng.standard_normal((small_mesh.n_nodes, 2))
    F1, F2 = np.array([0.5, -1.0]), 0.2
    system = assemble_coupled_system(small_mesh, 0.05, 1.0, 1.0, disk, z_prev, F0, F1, F2)
    z = solve_coupled(system)
    load = np.concatenate([F0.ravel(), F1, [F2]])
    assert 0.0 < a_priori_ratio(z, z_prev, load, 0.05, disk, small_mesh) <= 1.0 + 1e-12


def test_drag_history_takes_tail():
    records = [_record(0.0)] + [
        _record(0.1 * k, gap=1.5 - 0.1 * k, eta=(0.0, -1.0), force=(0.0, float(k))) for k in range(1, 11)
    ]
    history = drag_history(records, fraction=0.2)
    np.testing.assert_allclose(history.drag, [9.0, 10.0])
    np.testing.assert_allclose(history.resistance, [9.0, 10.0])
    np.testing.assert_allclose(history.gaps, [0.6, 0.5])
    assert history.monotonic


def test_drag_history_judges_force_per_unit_speed():
    # force eases off while the approach slows down faster
    records = [_record(0.0)] + [
        _record(0.1 * k, eta=(0.0, -1.0 / k), force=(0.0, 4.0 - 0.1 * k)) for k in range(1, 6)
    ]
    history = drag_history(records, fraction=1.0)
    assert np.all(np.diff(history.drag) < 0.0)
    np.testing.assert_allclose(history.resistance, [k * (4.0 - 0.1 * k) for k in range(1, 6)])
    assert history.monotonic


def test_drag_history_reports_non_monotonic():
    records = [_record(0.0)] + [
        _record(0.1 * k, eta=(0.0, -1.0), force=(0.0, float((-1) ** k))) for k in range(1, 5)
    ]
    assert not drag_history(records, fraction=1.0).monotonic
    accelerating = [_record(0.0)] + [
        _record(0.1 * k, eta=(0.0, -float(k)), force=(0.0, float(k))) for k in range(1, 5)
    ]
    assert not drag_history(accelerating, fraction=1.0).monotonic


def test_drag_history_of_resting_body_is_not_monotonic():
    records = [_record(0.0)] + [_record(0.1 * k, force=(0.0, float(k))) for k in range(1, 4)]
    history = drag_history(records, fraction=1.0)
    assert np.all(np.isinf(history.resistance))
    assert not history.monotonic


def test_taylor_couette_solution_satisfies_boundary_conditions():
    solution = TaylorCouetteSolution(0.5, 2.0, 1.0, 3.0, 1.5)
    assert solution.azimuthal(np.array(2.0)) == pytest.approx(0.0, abs=1e-15)
    shear_traction = 2.0 * solution.mu * solution.B / 0.5**2
    slip = solution.beta * (solution.w0 * 0.5 - solution.azimuthal(np.array(0.5)))
    assert shear_traction == pytest.approx(slip)
    np.testing.assert_allclose(solution.velocity(np.array([[1.0, 0.0]])), [[0.0, solution.azimuthal(1.0)]])


def test_taylor_couette_reduces_to_no_slip_for_large_beta():
    solution = TaylorCouetteSolution(0.5, 2.0, 1.0, 1e12, 1.0)
    assert solution.azimuthal(np.array(0.5)) == pytest.approx(0.5, rel=1e-9)


@pytest.mark.slow
def test_taylor_couette_converges_at_second_order():
    rows = taylor_couette_study(levels=3)
    assert [row.n_radial for row in rows] == [8, 16, 32]
    assert all(later.error < earlier.error for earlier, later in zip(rows, rows[1:]))
    assert all(row.order >= 1.8 for row in rows[1:])
