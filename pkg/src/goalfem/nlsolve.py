"""Newton's method with backtracking line search.

The solver works against a small problem interface (residual, linearized
solve, increment distribution) so scalar surrogates can exercise it in tests.
The line-search loop guard compares the trial residual against the residual
at the current iterate; a failed search returns the smallest-step trial and
flags no-decrease instead of aborting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .model import NonphysicalTemperatureError, assemble_jacobian, assemble_residual


@dataclass(frozen=True)
class NewtonConfig:
    beta: float = 0.7
    max_line_search: int = 20
    max_newton: int = 30
    res_abs: float = 1e-12
    res_rel: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")

    def tolerance(self, initial_residual):
        return max(self.res_abs, self.res_rel * initial_residual)


@dataclass
class NewtonReport:
    newton_steps: int = 0
    total_line_search_steps: int = 0
    final_residual: float = float("inf")
    converged: bool = False
    tolerance: float = 0.0
    residual_history: list = field(default_factory=list)


class NewtonDivergenceError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def line_search(problem, u, direction, current_norm, beta=0.7, max_iter=20):
    """Backtrack until the residual decreases.

    Returns (u_new, residual_vector or None, residual_norm, backtracks,
    decreased). A residual evaluation that fails with a nonphysical
    temperature counts as no decrease.
    """
    alpha = 1.0
    k = 0
    while True:
        trial = u + alpha * direction
        try:
            r = problem.residual(trial)
            rn = linalg.norm2(r)
            ok = np.isfinite(rn) and rn < current_norm
        except NonphysicalTemperatureError:
            r, rn, ok = None, float("inf"), False
        if ok:
            return trial, r, rn, k, True
        if k >= max_iter:
            return trial, r, rn, k, False
        alpha *= beta
        k += 1


def newton_solve(problem, u0, config=NewtonConfig()):
    """Iterate solve A'(U)P = -A(U) plus line search until the residual drops
    below max(res_abs, res_rel * ||A(U0)||)."""
    u = np.array(u0, dtype=float)
    r = problem.residual(u)
    rn = linalg.norm2(r)
    tol = config.tolerance(rn)
    report = NewtonReport(tolerance=tol, residual_history=[rn])
    while rn >= tol:
        if report.newton_steps >= config.max_newton:
            report.final_residual = rn
            raise NewtonDivergenceError(
                f"Newton did not reach {tol:.3e} within {config.max_newton} steps "
                f"(residual {rn:.3e})",
                report,
            )
        direction = problem.solve_linearized(u, -r)
        u, r, rn, ls, decreased = line_search(
            problem, u, direction, rn, beta=config.beta, max_iter=config.max_line_search
        )
        if r is None:
            report.final_residual = rn
            raise NewtonDivergenceError(
                "line search could not produce a physically valid state", report
            )
        report.newton_steps += 1
        report.total_line_search_steps += ls
        report.residual_history.append(rn)
    report.final_residual = rn
    report.converged = True
    return u, report


class DiscreteSystem:
    """Bridges a Space and a Model to the Newton interface.

    Residuals are constraint-condensed; directions come back distributed, so
    adding them to a constraint-satisfying state keeps it admissible.
    """

    def __init__(self, space, model, boost=2, rule=None, permc_spec="MMD_AT_PLUS_A"):
        self.space = space
        self.model = model
        self.boost = boost
        self.rule = rule or space.assembly_rule(boost)
        self.permc_spec = permc_spec
        self._nd_perm = None

    def _fill_reducing_order(self):
        if self._nd_perm is None:
            dofs = np.concatenate(
                [self.space.field_cell_dofs(f) for f in range(4)], axis=1
            )
            centers = self.space.mesh.active_coords().mean(axis=1)
            self._nd_perm = linalg.nested_dissection_order(
                dofs, centers, self.space.n_dofs
            )
        return self._nd_perm

    def residual(self, u, condense=True):
        return assemble_residual(self.space, u, self.model, condense=condense, rule=self.rule)

    def residual_norm(self, u):
        return linalg.norm2(self.residual(u))

    def jacobian(self, u, condense=True):
        return assemble_jacobian(self.space, u, self.model, condense=condense, rule=self.rule)

    def factorized_jacobian(self, u):
        return linalg.Factorization(
            self.jacobian(u), permc_spec=self.permc_spec,
            perm=self._fill_reducing_order(),
        )

    def solve_linearized(self, u, rhs):
        fact = self.factorized_jacobian(u)
        delta = fact.solve(rhs)
        return self.space.constraints.homogenize(delta)
