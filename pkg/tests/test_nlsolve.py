import math

import numpy as np
import pytest

from goalfem import fespace as fe, model as md
from goalfem.fespace import DegreeTriple, build_space
from goalfem.mesh import create_square
from goalfem.nlsolve import (
    DiscreteSystem,
    NewtonConfig,
    NewtonDivergenceError,
    line_search,
    newton_solve,
)


class ScalarProblem:
    """Tiny 1-dof stand-in: residual f(u), Newton step -f/f'."""

    def __init__(self, f, df):
        self.f = f
        self.df = df

    def residual(self, u):
        return np.array([self.f(float(u[0]))])

    def solve_linearized(self, u, rhs):
        return rhs / self.df(float(u[0]))


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(beta=1.0)
    with pytest.raises(ValueError):
        NewtonConfig(beta=0.0)
    cfg = NewtonConfig()
    assert cfg.tolerance(1000.0) == pytest.approx(1e-6)
    assert cfg.tolerance(1e-9) == pytest.approx(1e-12)  # absolute floor


def test_line_search_full_step_accepted():
    prob = ScalarProblem(lambda u: u - 1.0, lambda u: 1.0)
    u = np.array([5.0])
    direction = np.array([-4.0])  # exact Newton step
    u_new, r, rn, k, decreased = line_search(prob, u, direction, 4.0)
    assert k == 0 and decreased
    assert rn == pytest.approx(0.0, abs=1e-15)


def test_line_search_overshoot_backtracks_twice():
    # A(u) = u^2 from u=1 with direction -3: alpha=1 -> |4|, 0.7 -> |1.21|,
    # 0.49 -> |0.2209| < 1, so exactly two backtracks
    prob = ScalarProblem(lambda u: u * u, lambda u: 2 * u)
    u = np.array([1.0])
    direction = np.array([-3.0])
    u_new, r, rn, k, decreased = line_search(prob, u, direction, 1.0, beta=0.7)
    assert k == 2 and decreased
    assert u_new[0] == pytest.approx(1.0 - 0.49 * 3.0)
    assert rn == pytest.approx(0.2209, rel=1e-12)


def test_line_search_no_decrease_flagged():
    # residual independent of the step: impossible to decrease
    prob = ScalarProblem(lambda u: 1.0, lambda u: 1.0)
    u = np.array([0.0])
    u_new, r, rn, k, decreased = line_search(prob, u, np.array([1.0]), 1.0, max_iter=5)
    assert not decreased
    assert k == 5
    assert u_new[0] == pytest.approx(0.7**5)


def test_newton_quadratic_contraction():
    prob = ScalarProblem(lambda u: u * u - 2.0, lambda u: 2 * u)
    u, report = newton_solve(prob, np.array([5.0]), NewtonConfig(res_abs=1e-14, res_rel=0.0))
    assert report.converged
    assert u[0] == pytest.approx(math.sqrt(2.0), rel=1e-12)
    errors = [r for r in report.residual_history if r > 0][-3:]
    # ratios of consecutive log-errors approach 2 (quadratic order)
    ratios = [
        math.log(errors[i + 1]) / math.log(errors[i]) for i in range(len(errors) - 1)
    ]
    for ratio in ratios:
        assert 1.4 <= ratio <= 2.6


def test_newton_stops_on_printed_tolerance():
    prob = ScalarProblem(lambda u: 1e3 * (u - 0.5), lambda u: 1e3)
    u, report = newton_solve(prob, np.array([2.0]), NewtonConfig())
    r0 = 1e3 * 1.5
    assert report.tolerance == pytest.approx(max(1e-12, 1e-9 * r0))
    assert report.final_residual < report.tolerance


def test_newton_divergence_error_carries_history():
    prob = ScalarProblem(lambda u: math.exp(u), lambda u: math.exp(u))  # no root
    with pytest.raises(NewtonDivergenceError) as err:
        newton_solve(prob, np.array([0.0]), NewtonConfig(max_newton=4))
    assert len(err.value.report.residual_history) == 5


def test_newton_determinism():
    prob = ScalarProblem(lambda u: u**3 - u - 2.0, lambda u: 3 * u * u - 1.0)
    _, rep1 = newton_solve(prob, np.array([2.0]), NewtonConfig())
    _, rep2 = newton_solve(prob, np.array([2.0]), NewtonConfig())
    assert rep1.residual_history == rep2.residual_history


def test_residual_history_non_increasing_when_decreased():
    prob = ScalarProblem(lambda u: math.atan(u), lambda u: 1.0 / (1 + u * u))
    u, report = newton_solve(prob, np.array([3.0]), NewtonConfig(res_abs=1e-10, res_rel=0.0))
    hist = report.residual_history
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_linear_model_converges_in_one_step():
    m = create_square((0, 0), 1.0, 2)
    space = build_space(m, DegreeTriple(2, 1, 1), {"velocity": 0.0, "temperature": 0.0})
    src = md.LaserSource(centers=((0.4, 0.6),), amplitudes=(5.0,), sigma=0.15)
    model = md.Model(kind=md.ModelKind.LINEAR_VERIFICATION, source=src)
    system = DiscreteSystem(space, model)
    u, report = newton_solve(system, space.constant_state(), NewtonConfig())
    assert report.converged
    assert report.newton_steps == 1
    assert report.total_line_search_steps == 0


def test_density_newton_on_small_problem():
    m = create_square((0, 0), 0.3, 3)
    space = build_space(m, DegreeTriple(2, 1, 1), {"velocity": 0.0, "temperature": 293.15})
    sigma = math.sqrt(1 / 500.0)
    src = md.LaserSource(centers=((0.05, 0.05), (0.25, 0.05)),
                         amplitudes=(125.0, 125.0), sigma=sigma)
    model = md.Model(kind=md.ModelKind.DENSITY, source=src)
    system = DiscreteSystem(space, model)
    u, report = newton_solve(system, space.constant_state(theta=293.15), NewtonConfig())
    assert report.converged
    assert report.final_residual < report.tolerance
    # self-consistency: the residual at the returned state is below tolerance
    assert np.linalg.norm(system.residual(u)) < report.tolerance


def test_nonphysical_trial_state_counts_as_no_decrease():
    m = create_square((0, 0), 0.3, 2)
    space = build_space(m, DegreeTriple(2, 1, 1), {"velocity": 0.0, "temperature": 293.15})
    model = md.Model(kind=md.ModelKind.DENSITY, source=None)
    system = DiscreteSystem(space, model)
    u = space.constant_state(theta=293.15)
    bad = np.zeros(space.n_dofs)
    bad[space.field_slice(fe.FIELD_T)] = -400.0  # full step makes theta negative
    bad = space.constraints.homogenize(bad)
    rn = np.linalg.norm(system.residual(u))
    u_new, r, rn_new, k, decreased = line_search(system, u, bad, max(rn, 1e-8))
    assert k >= 1  # at least one backtrack forced by the physicality guard
