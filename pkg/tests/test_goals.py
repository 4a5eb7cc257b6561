import math

import numpy as np
import pytest

from goalfem import fespace as fe, goals as gl
from goalfem.fespace import DegreeTriple, build_space
from goalfem.mesh import create_square, refine

BC0 = {"velocity": 0.0, "temperature": 0.0}


@pytest.fixture(scope="module")
def space():
    m = refine(create_square((0, 0), 1.0, 2), [1])
    return build_space(m, DegreeTriple(2, 1, 1), BC0)


def _interpolate(space, field, f):
    """Nodal interpolation of f(x, y) into one scalar field (ignores BCs)."""
    u = np.zeros(space.n_dofs)
    num = space.scalar[field]
    ref = fe.reference_element(space.degrees.field_degrees()[field])
    for cid in (int(c) for c in space.mesh.active_cell_ids()):
        corners = space.mesh.cell_coords(cid)
        row = num.row_of_cell(cid)
        for loc, node in enumerate(ref.nodes):
            s, t = node
            shape = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
            x, y = shape @ corners
            u[space.offsets[field] + num.cell_dofs[row, loc]] = f(x, y)
    return u


def test_mean_temperature_of_constant(space):
    u = np.zeros(space.n_dofs)
    u[space.field_slice(fe.FIELD_T)] = 300.0
    assert gl.MeanTemperature().value(space, u) == pytest.approx(300.0, rel=1e-13)


def test_boundary_flux_of_linear_field_cancels(space):
    u = _interpolate(space, fe.FIELD_T, lambda x, y: x)
    assert gl.BoundaryHeatFlux().value(space, u) == pytest.approx(0.0, abs=1e-12)


def test_boundary_flux_of_quadratic_field(space):
    # theta = x^2 on the unit square: flux 2 through x=1, 0 through x=0
    u = _interpolate(space, fe.FIELD_T, lambda x, y: x * x)
    # temperature space is Q1, x^2 is not representable: use velocity-degree field
    m = space.mesh
    sp2 = build_space(m, DegreeTriple(3, 1, 2), BC0)
    u2 = _interpolate(sp2, fe.FIELD_T, lambda x, y: x * x)
    assert gl.BoundaryHeatFlux().value(sp2, u2) == pytest.approx(2.0, rel=1e-12)


def test_pressure_difference_linear_field():
    m = create_square((0, 0), 0.3, 3)
    sp = build_space(m, DegreeTriple(2, 1, 1), BC0)
    u = _interpolate(sp, fe.FIELD_P, lambda x, y: x)
    goal = gl.PressureDifference((0.05, 0.15), (0.25, 0.15))
    assert goal.value(sp, u) == pytest.approx(-0.2, abs=1e-13)


def test_mean_velocity_magnitude_zero_state(space):
    goal = gl.MeanVelocityMagnitude()
    u = np.zeros(space.n_dofs)
    assert goal.value(space, u) == pytest.approx(goal.eps, abs=1e-15)
    deriv = goal.derivative(space, u)
    assert np.abs(deriv).max() == 0.0


def test_linear_goal_derivative_state_independent(space):
    rng = np.random.default_rng(0)
    goal = gl.MeanTemperature()
    d1 = goal.derivative(space, rng.normal(0, 1, space.n_dofs))
    d2 = goal.derivative(space, rng.normal(0, 1, space.n_dofs))
    np.testing.assert_array_equal(d1, d2)


def _fd_check(goal, space, u, rng, rel=1e-6):
    j = goal.derivative(space, u)
    base = np.linalg.norm(u)
    for _ in range(3):
        w = space.constraints.homogenize(rng.normal(0, 1, space.n_dofs))
        h = 1e-6 * max(1.0, base) / np.linalg.norm(w)
        fd = (goal.value(space, u + h * w) - goal.value(space, u - h * w)) / (2 * h)
        pairing = float(np.dot(j, w))
        assert pairing == pytest.approx(fd, rel=rel, abs=1e-12 * max(1.0, abs(fd)))


def test_goal_derivatives_match_finite_differences(space):
    rng = np.random.default_rng(1)
    u = space.constraints.homogenize(rng.normal(0, 1, space.n_dofs))
    u[space.field_slice(fe.FIELD_T)] += 280.0
    u = space.constraints.homogenize(u)
    goal_list = [
        gl.MeanVelocityMagnitude(),
        gl.MeanTemperature(),
        gl.PointTemperature((0.4, 0.6)),
        gl.PointVelocityComponent((0.4, 0.6), 0),
        gl.PointVelocityComponent((0.3, 0.2), 1),
        gl.PointSpeedSquared((0.6, 0.7)),
        gl.PressureDifference((0.2, 0.2), (0.8, 0.8)),
        gl.BoundaryHeatFlux(),
    ]
    for goal in goal_list:
        _fd_check(goal, space, u, rng)


def test_point_speed_squared_at_known_velocity():
    m = create_square((0, 0), 1.0, 2)
    sp = build_space(m, DegreeTriple(2, 1, 1), BC0)
    u = np.zeros(sp.n_dofs)
    u[sp.field_slice(fe.FIELD_VX)] = 1.0
    u[sp.field_slice(fe.FIELD_VY)] = 2.0
    goal = gl.PointSpeedSquared((0.4, 0.6))
    assert goal.value(sp, u) == pytest.approx(5.0, rel=1e-12)
    rng = np.random.default_rng(2)
    _fd_check(goal, sp, u, rng)


# -- combination -----------------------------------------------------------------


def test_combine_prevents_cancellation():
    goals = [gl.MeanTemperature()] * 3
    low = np.zeros(3)  # vanishing functionals: omega = 1
    enriched = np.array([1.0, 1.0, -2.0])
    gs = gl.combine(goals, low, enriched)
    np.testing.assert_array_equal(gs.user_weights, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(gs.signed_weights, [1.0, 1.0, -1.0])
    assert np.dot(np.ones(3), enriched - low) == pytest.approx(0.0)  # plain sum cancels
    assert gs.combined_error == pytest.approx(4.0)


def test_combine_single_goal():
    gs = gl.combine([gl.MeanTemperature()], [2.0], [2.5])
    assert abs(gs.signed_weights[0]) == pytest.approx(gs.user_weights[0])
    assert gs.combined_error == pytest.approx(0.5 / 2.0)


def test_combine_zero_differences_keep_positive_weights():
    gs = gl.combine([gl.MeanTemperature()] * 2, [2.0, 3.0], [2.0, 3.0])
    np.testing.assert_allclose(gs.signed_weights, gs.user_weights)


def test_combine_weights_never_cancel():
    rng = np.random.default_rng(3)
    for _ in range(20):
        low = rng.normal(0, 10, 4)
        enriched = low + rng.normal(0, 1, 4)
        gs = gl.combine([gl.MeanTemperature()] * 4, low, enriched)
        contributions = gs.signed_weights * (enriched - low)
        assert np.all(contributions >= 0)
        # exact identity: combined error equals the weighted magnitude sum
        assert gs.combined_error == pytest.approx(
            float(np.dot(gs.user_weights, np.abs(enriched - low))), abs=1e-14
        )


def test_combine_omega_rule():
    gs = gl.combine([gl.MeanTemperature()] * 2, [4.0, 1e-14], [5.0, 1e-13])
    assert gs.user_weights[0] == pytest.approx(0.25)
    assert gs.user_weights[1] == 1.0  # vanishing functional


def test_combine_misaligned_lists_rejected():
    with pytest.raises(ValueError):
        gl.combine([gl.MeanTemperature()], [1.0, 2.0], [1.0, 2.0])


# -- PU pairing consistency --------------------------------------------------------


def test_pu_pairing_sums_to_global_pairing(space):
    """Summing J'(u)(w phi_a) over all PU hats equals J'(u)(w) exactly."""
    rng = np.random.default_rng(4)
    u = space.constraints.homogenize(rng.normal(0, 1, space.n_dofs))
    u[space.field_slice(fe.FIELD_T)] += 280.0
    u = space.constraints.homogenize(u)
    w = space.constraints.homogenize(rng.normal(0, 1, space.n_dofs))
    rule = space.assembly_rule(2)
    goal_list = [
        gl.MeanVelocityMagnitude(),
        gl.MeanTemperature(),
        gl.PointTemperature((0.4, 0.6)),
        gl.PointSpeedSquared((0.6, 0.7)),
        gl.PressureDifference((0.2, 0.2), (0.8, 0.8)),
        gl.BoundaryHeatFlux(),
    ]
    for goal in goal_list:
        node = np.zeros(len(space.mesh.vertices))
        goal.pu_pairing(space, u, w, node, 1.0, rule)
        total = float(np.sum(node))
        direct = float(np.dot(goal.derivative(space, u, rule=rule), w))
        assert total == pytest.approx(direct, rel=1e-12, abs=1e-13)
