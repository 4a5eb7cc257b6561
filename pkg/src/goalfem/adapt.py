"""Marking strategy and the outer adaptive loop.

Each level solves the primal problem (warm-started from the previous level),
runs the enriched/adjoint pipeline, estimates, and re-enters Newton with a
hundredfold tighter tolerance while the iteration-error part eta_k is above
threshold. Cells are marked by the largest absolute indicator contributions
(a fixed fraction of the active cells) and refined with hanging nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dwr, goals as goalsmod
from .fespace import build_space, interpolate_to_refined
from .mesh import refine
from .nlsolve import DiscreteSystem, NewtonConfig, NewtonReport, newton_solve


@dataclass(frozen=True)
class AdaptConfig:
    tol: float = 0.0
    max_ndofs: int = 200_000
    mark_fraction: float = 0.10
    max_levels: int = 100
    eta_k_threshold: float = 1e-10
    max_eta_k_reentries: int = 3

    def __post_init__(self):
        if not 0.0 < self.mark_fraction <= 1.0:
            raise ValueError("mark_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class ProblemSetup:
    """A fully specified experiment: mesh, model, goals, boundary data."""

    name: str
    mesh: object
    degrees: object
    model: object
    goals: list
    theta_boundary: float
    reference_values: np.ndarray | None = None
    reference_source: str = "none"
    boost: int = 2


@dataclass
class LevelRecord:
    level: int
    n_dofs: int
    n_cells: int
    goal_values: np.ndarray
    goal_values_enriched: np.ndarray
    user_weights: np.ndarray
    signed_weights: np.ndarray
    estimator: dwr.EstimatorReport
    newton: NewtonReport
    enriched_newton: NewtonReport
    eta_k_reentries: int
    abs_errors: np.ndarray | None = None
    rel_errors: np.ndarray | None = None
    true_combined_error: float | None = None
    i_eff: float | None = None
    i_eff_p: float | None = None
    i_eff_a: float | None = None
    marked: list = field(default_factory=list)


def mark_top_fraction(indicators, fraction, cell_ids=None):
    """Ids of the ceil(fraction * n) cells with the largest |indicator|.

    Ties are broken by ascending cell id.
    """
    indicators = np.asarray(indicators, dtype=float)
    n = indicators.size
    if n == 0:
        raise ValueError("need at least one cell to mark")
    if cell_ids is None:
        cell_ids = np.arange(n, dtype=np.int64)
    else:
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
    n_mark = int(math.ceil(fraction * n))
    order = np.lexsort((cell_ids, -np.abs(indicators)))
    return cell_ids[order[:n_mark]]


def _accumulate(total, rep):
    total.newton_steps += rep.newton_steps
    total.total_line_search_steps += rep.total_line_search_steps
    total.final_residual = rep.final_residual
    total.converged = rep.converged
    total.tolerance = rep.tolerance
    total.residual_history.extend(rep.residual_history)
    return total


def run_level(problem, mesh, newton_config, adapt_config, warm_start=None):
    """Solve one level and estimate; returns the record plus warm-start state."""
    bc = {"velocity": 0.0, "temperature": problem.theta_boundary}
    space1 = build_space(mesh, problem.degrees, bc)
    space2 = build_space(mesh, problem.degrees.enriched(), bc)
    rule = space2.assembly_rule(problem.boost)
    sys1 = DiscreteSystem(space1, problem.model, rule=rule)
    sys2 = DiscreteSystem(space2, problem.model, rule=rule)

    if warm_start is None:
        u0 = space1.constant_state(theta=problem.theta_boundary)
    else:
        prev_space, prev_u = warm_start
        u0 = interpolate_to_refined(prev_space, space1, prev_u)

    u, rep = newton_solve(sys1, u0, newton_config)
    newton_total = rep
    enriched_total = None
    reentries = 0
    while True:
        pair, erep = dwr.solve_enriched(sys1, sys2, u, problem.goals, newton_config)
        enriched_total = erep if enriched_total is None else _accumulate(enriched_total, erep)
        report = dwr.estimate(pair, problem.model, boost=problem.boost)
        if abs(report.eta_k) < adapt_config.eta_k_threshold:
            break
        if reentries >= adapt_config.max_eta_k_reentries:
            break
        tighter = replace(
            newton_config,
            res_abs=newton_total.tolerance * 1e-2 ** (reentries + 1),
            res_rel=0.0,
        )
        u, rep = newton_solve(sys1, u, tighter)
        newton_total = _accumulate(newton_total, rep)
        reentries += 1

    record = LevelRecord(
        level=-1,
        n_dofs=space1.n_dofs,
        n_cells=mesh.n_active,
        goal_values=pair.goalset.values_low,
        goal_values_enriched=pair.goalset.values_enriched,
        user_weights=pair.goalset.user_weights,
        signed_weights=pair.goalset.signed_weights,
        estimator=report,
        newton=newton_total,
        enriched_newton=enriched_total,
        eta_k_reentries=reentries,
    )
    return record, (space1, u)


def attach_reference(records, reference_values, source="self"):
    """Fill per-level error columns and effectivity indices from a reference."""
    ref = np.asarray(reference_values, dtype=float)
    for rec in records:
        rec.abs_errors = np.abs(ref - rec.goal_values)
        with np.errstate(divide="ignore", invalid="ignore"):
            rec.rel_errors = np.where(ref != 0.0, rec.abs_errors / np.abs(ref), rec.abs_errors)
        rec.true_combined_error = float(np.dot(rec.signed_weights, ref - rec.goal_values))
        est = rec.estimator
        if rec.true_combined_error != 0.0:
            err = abs(rec.true_combined_error)
            rec.i_eff = abs(est.eta_h) / err
            rec.i_eff_p = abs(est.eta_p) / err
            rec.i_eff_a = abs(est.eta_a) / err
        est.i_eff, est.i_eff_p, est.i_eff_a = rec.i_eff, rec.i_eff_p, rec.i_eff_a
    return records


def adaptive_loop(problem, adapt_config, newton_config=NewtonConfig(), on_level=None):
    """Run solve -> estimate -> mark -> refine until a stopping rule fires.

    Always solves at least one level. Stops when |eta_h| <= 1e-2 * tol, when
    the just-solved level reached max_ndofs, or when max_levels is exhausted.
    If reference values are attached to the problem, error and effectivity
    columns are filled as the run goes.
    """
    mesh = problem.mesh
    records = []
    warm = None
    level = 0
    while True:
        record, warm = run_level(problem, mesh, newton_config, adapt_config, warm)
        record.level = level
        if problem.reference_values is not None:
            attach_reference([record], problem.reference_values, problem.reference_source)
        records.append(record)

        stop = (
            abs(record.estimator.eta_h) <= 1e-2 * adapt_config.tol
            or record.n_dofs >= adapt_config.max_ndofs
            or level + 1 >= adapt_config.max_levels
        )
        if not stop:
            marked = mark_top_fraction(
                record.estimator.cell_indicators,
                adapt_config.mark_fraction,
                cell_ids=mesh.active_cell_ids(),
            )
            record.marked = [int(c) for c in marked]
        if on_level is not None:
            on_level(record, mesh, warm[0], warm[1])
        if stop:
            break
        mesh = refine(mesh, record.marked)
        level += 1
    return records
