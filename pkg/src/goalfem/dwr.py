"""Dual-weighted-residual machinery.

The estimator follows the hierarchical two-space construction: the low-order
primal/adjoint pair is embedded into an enriched space (double polynomial
degree), the enriched primal is solved by warm-started Newton, the enriched
adjoint by one transposed linear solve, and the error estimate combines

    eta_p = -A(U~)(Z2 - Z~),
    eta_a = J'(U~)(U2 - U~) - A'(U~)(U2 - U~, Z~),
    eta_k = -A(U~)(Z~),
    eta_h = (eta_p + eta_a) / 2,

all assembled in the enriched space. Localization multiplies the weight
functions by Q1 hat functions; the nodal values sum to eta_h exactly (same
quadrature) and are split equally over the cells sharing each node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import goals as goalsmod
from .fespace import embed
from .model import jacobian_form_values, residual_form_values, source_eval
from .nlsolve import newton_solve


@dataclass
class EstimatorReport:
    eta_p: float
    eta_a: float
    eta_k: float
    eta_h: float
    node_indicators: np.ndarray  # indexed by mesh vertex id
    cell_indicators: np.ndarray  # per active cell
    i_eff: float | None = None
    i_eff_p: float | None = None
    i_eff_a: float | None = None

    @property
    def pu_sum(self):
        return float(np.sum(self.node_indicators))


@dataclass
class EnrichedPair:
    primal_space: object
    enriched_space: object
    u_low: np.ndarray
    u_low_embedded: np.ndarray
    adjoint_low: np.ndarray
    adjoint_low_embedded: np.ndarray
    primal_enriched: np.ndarray
    adjoint_enriched: np.ndarray
    goalset: goalsmod.GoalSet
    rule: object = None


def solve_adjoint(system, u, goal_derivative):
    """Solve A'(U)(Phi, Z) = J'(U)(Phi) for Z with homogeneous constraints.

    ``goal_derivative`` is the raw vector j[i] = J'(U)(phi_i); the transposed
    condensed Jacobian is solved with the factorization also used plain.
    """
    fact = system.factorized_jacobian(u)
    rhs = system.space.constraints.condense_residual(goal_derivative)
    zhat = fact.solve(rhs, transpose=True)
    return system.space.constraints.homogenize(zhat)


def solve_enriched(primal_system, enriched_system, u_low, goal_list, newton_config):
    """Enriched primal solve plus both adjoints; returns the full weight pair.

    Goal values entering the signed-weight combination are all evaluated in
    the enriched space with its quadrature so the combined error is exactly
    what the estimator targets.
    """
    space1 = primal_system.space
    space2 = enriched_system.space
    u_emb = embed(space1, space2, u_low)
    u2, report2 = newton_solve(enriched_system, u_emb, newton_config)

    rule2 = enriched_system.rule
    values_low = goalsmod.evaluate_all(goal_list, space2, u_emb, rule=rule2)
    values_enr = goalsmod.evaluate_all(goal_list, space2, u2, rule=rule2)
    goalset = goalsmod.combine(goal_list, values_low, values_enr)

    j_enriched = goalset.combined_derivative(space2, u2, rule=rule2)
    z2 = solve_adjoint(enriched_system, u2, j_enriched)

    j_low = goalset.combined_derivative(space1, u_low, rule=rule2)
    z_low = solve_adjoint(primal_system, u_low, j_low)

    pair = EnrichedPair(
        primal_space=space1,
        enriched_space=space2,
        u_low=u_low,
        u_low_embedded=u_emb,
        adjoint_low=z_low,
        adjoint_low_embedded=embed(space1, space2, z_low, homogeneous=True),
        primal_enriched=u2,
        adjoint_enriched=z2,
        goalset=goalset,
        rule=rule2,
    )
    return pair, report2


def estimate(pair, model, boost=2):
    """Three-part estimator plus PU localization for one solved level."""
    space2 = pair.enriched_space
    rule = pair.rule or space2.assembly_rule(boost)
    u_t = pair.u_low_embedded
    w = pair.primal_enriched - u_t
    z_t = pair.adjoint_low_embedded
    z_diff = pair.adjoint_enriched - z_t

    raw = _raw_residual(space2, u_t, model, rule)
    eta_p = -float(np.dot(raw, z_diff))
    eta_k = -float(np.dot(raw, z_t))

    geom = space2.geometry(rule)
    F = space2.eval_fields(u_t, rule)
    Wv = space2.eval_fields(w, rule)
    Ztv = space2.eval_fields(z_t, rule)
    j2 = pair.goalset.combined_derivative(space2, u_t, rule=rule)
    action = float(np.sum(jacobian_form_values(model, F, Wv, Ztv) * geom.jxw))
    eta_a = float(np.dot(j2, w)) - action
    eta_h = 0.5 * (eta_p + eta_a)

    node, cell = localize_pu(
        pair, model, rule=rule, fields=(F, Wv, Ztv, space2.eval_fields(z_diff, rule))
    )
    return EstimatorReport(
        eta_p=eta_p, eta_a=eta_a, eta_k=eta_k, eta_h=eta_h,
        node_indicators=node, cell_indicators=cell,
    )


def _raw_residual(space, u, model, rule):
    from .model import assemble_residual

    return assemble_residual(space, u, model, condense=False, rule=rule)


def _pu_products(values, hat_vals, hat_grads):
    """Pointwise fields of (function * hat): product rule for the gradients."""
    out = {
        "v": values["v"] * hat_vals[..., None],
        "grad_v": values["grad_v"] * hat_vals[..., None, None]
        + np.einsum("cqi,cqj->cqij", values["v"], hat_grads),
        "p": values["p"] * hat_vals,
        "theta": values["theta"] * hat_vals,
        "grad_theta": values["grad_theta"] * hat_vals[..., None]
        + values["theta"][..., None] * hat_grads,
    }
    return out


def localize_pu(pair, model, rule=None, fields=None):
    """Partition-of-unity node indicators and their per-cell distribution.

    Node i receives eta_i = 1/2 (eta_p((Z2-Z~) phi_i) + eta_a((U2-U~) phi_i));
    each node value is then split equally over the active cells sharing the
    node, and a cell accumulates the shares of its four corners.
    """
    space2 = pair.enriched_space
    mesh = space2.mesh
    rule = rule or pair.rule or space2.assembly_rule()
    geom = space2.geometry(rule)
    if fields is None:
        u_t = pair.u_low_embedded
        F = space2.eval_fields(u_t, rule)
        Wv = space2.eval_fields(pair.primal_enriched - u_t, rule)
        Ztv = space2.eval_fields(pair.adjoint_low_embedded, rule)
        Zdv = space2.eval_fields(pair.adjoint_enriched - pair.adjoint_low_embedded, rule)
    else:
        F, Wv, Ztv, Zdv = fields
    fsrc = source_eval(model.source, geom.qpoints)

    hat_vals, hat_gref = space2.basis(1, rule)  # (4, nq), (4, nq, 2)
    hat_gphys = np.einsum("cqij,aqj->acqi", geom.jac_inv_T, hat_gref)

    corners = np.array(
        [mesh.cells[int(c)].vertex_ids for c in mesh.active_cell_ids()], dtype=np.int64
    )
    node = np.zeros(len(mesh.vertices))
    for a in range(4):
        hv = np.broadcast_to(hat_vals[a], geom.jxw.shape)
        test_a = _pu_products(Zdv, hv, hat_gphys[a])
        res_cell = -np.sum(residual_form_values(model, F, fsrc, test_a) * geom.jxw, axis=1)
        dir_a = _pu_products(Wv, hv, hat_gphys[a])
        jac_cell = -np.sum(jacobian_form_values(model, F, dir_a, Ztv) * geom.jxw, axis=1)
        np.add.at(node, corners[:, a], 0.5 * (res_cell + jac_cell))
    # the J'(U~)((U2-U~) phi_i) part of eta_a, goal by goal
    w_state = pair.primal_enriched - pair.u_low_embedded
    pair.goalset.pu_pairing(space2, pair.u_low_embedded, w_state, node, 0.5, rule)

    counts = mesh.vertex_active_cell_count()
    share = np.where(counts > 0, node / np.maximum(counts, 1), 0.0)
    cell = share[corners].sum(axis=1)
    return node, cell


def effectivity(eta_h, eta_p, eta_a, reference_value, value):
    """Effectivity indices against a reference; None triple if the true error
    vanishes (undefined, not an error)."""
    true_error = abs(reference_value - value)
    if true_error == 0.0:
        return None, None, None
    return (
        abs(eta_h) / true_error,
        abs(eta_p) / true_error,
        abs(eta_a) / true_error,
    )
