"""Goal functionals, their derivatives, and the signed-weight combination.

Every goal provides three views used by the error estimator:

* ``value(space, u)`` -- the functional itself,
* ``derivative(space, u)`` -- the raw vector j with j[i] = J'(U)(phi_i),
* ``pu_pairing(space, u, w, node_acc, scale)`` -- scatters J'(U)(w * phi_a)
  over the partition-of-unity hat functions phi_a into per-vertex
  accumulators, so the localization identity sums exactly to the global
  pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fespace import (
    FIELD_P,
    FIELD_T,
    FIELD_VX,
    FIELD_VY,
    reference_element,
)

_FACE_CACHE = {}


def _face_tabulation(degree, edge, ref_points_key, ref_points):
    key = (degree, edge, ref_points_key)
    if key not in _FACE_CACHE:
        _FACE_CACHE[key] = reference_element(degree).tabulate(ref_points)
    return _FACE_CACHE[key]


def _pu_values(space, rule):
    vals, grads = space.basis(1, rule)
    return vals, grads  # (4, nq), (4, nq, 2) reference gradients


def _active_corner_vertices(space):
    mesh = space.mesh
    return np.array(
        [mesh.cells[int(c)].vertex_ids for c in mesh.active_cell_ids()], dtype=np.int64
    )


def _domain_measure(space, rule):
    return float(np.sum(space.geometry(rule).jxw))


@dataclass(frozen=True)
class MeanVelocityMagnitude:
    """(1/|Omega|) * integral of sqrt(v.v + eps^2); eps regularizes v = 0."""

    eps: float = 1e-10

    def value(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        geom = space.geometry(rule)
        F = space.eval_fields(u, rule)
        mag = np.sqrt(np.einsum("cqi,cqi->cq", F["v"], F["v"]) + self.eps**2)
        return float(np.sum(mag * geom.jxw)) / _domain_measure(space, rule)

    def derivative(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        geom = space.geometry(rule)
        F = space.eval_fields(u, rule)
        mag = np.sqrt(np.einsum("cqi,cqi->cq", F["v"], F["v"]) + self.eps**2)
        scale = geom.jxw / (mag * _domain_measure(space, rule))
        pv, _ = space.basis(space.degrees.velocity, rule)
        out = np.zeros(space.n_dofs)
        for c, f in ((0, FIELD_VX), (1, FIELD_VY)):
            loc = (F["v"][:, :, c] * scale) @ pv.T
            np.add.at(out, space.field_cell_dofs(f), loc)
        return out

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        geom = space.geometry(rule)
        F = space.eval_fields(u, rule)
        W = space.eval_fields(w, rule)
        mag = np.sqrt(np.einsum("cqi,cqi->cq", F["v"], F["v"]) + self.eps**2)
        dens = (
            np.einsum("cqi,cqi->cq", F["v"], W["v"]) / mag
            * geom.jxw
            / _domain_measure(space, rule)
        )
        pu, _ = _pu_values(space, rule)
        contrib = scale * (dens @ pu.T)  # (nc, 4)
        np.add.at(node_acc, _active_corner_vertices(space), contrib)


@dataclass(frozen=True)
class MeanTemperature:
    """(1/|Omega|) * integral of theta."""

    def value(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        geom = space.geometry(rule)
        F = space.eval_fields(u, rule)
        return float(np.sum(F["theta"] * geom.jxw)) / _domain_measure(space, rule)

    def derivative(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        geom = space.geometry(rule)
        pt, _ = space.basis(space.degrees.temperature, rule)
        out = np.zeros(space.n_dofs)
        loc = (geom.jxw / _domain_measure(space, rule)) @ pt.T
        np.add.at(out, space.field_cell_dofs(FIELD_T), loc)
        return out

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        geom = space.geometry(rule)
        W = space.eval_fields(w, rule)
        dens = W["theta"] * geom.jxw / _domain_measure(space, rule)
        pu, _ = _pu_values(space, rule)
        np.add.at(node_acc, _active_corner_vertices(space), scale * (dens @ pu.T))


class _PointGoal:
    """Shared machinery for Dirac-type goals; the owning cell spreads the
    contribution over its four PU corners."""

    def _pu_point(self, space, point, amount, node_acc, scale):
        cid, ref = space.mesh.locate(point)
        s, t = ref
        hats = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
        vids = space.mesh.cells[cid].vertex_ids
        for a in range(4):
            node_acc[vids[a]] += scale * amount * hats[a]


@dataclass(frozen=True)
class PointTemperature(_PointGoal):
    point: tuple

    def value(self, space, u, rule=None):
        return space.evaluate_at_point(u, self.point)["theta"]

    def derivative(self, space, u, rule=None):
        return space.point_evaluation_vector(FIELD_T, self.point)

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        wt = space.evaluate_at_point(w, self.point)["theta"]
        self._pu_point(space, self.point, wt, node_acc, scale)


@dataclass(frozen=True)
class PointVelocityComponent(_PointGoal):
    point: tuple
    axis: int

    def value(self, space, u, rule=None):
        return float(space.evaluate_at_point(u, self.point)["v"][self.axis])

    def derivative(self, space, u, rule=None):
        f = FIELD_VX if self.axis == 0 else FIELD_VY
        return space.point_evaluation_vector(f, self.point)

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        wv = float(space.evaluate_at_point(w, self.point)["v"][self.axis])
        self._pu_point(space, self.point, wv, node_acc, scale)


@dataclass(frozen=True)
class PointSpeedSquared(_PointGoal):
    point: tuple

    def value(self, space, u, rule=None):
        v = space.evaluate_at_point(u, self.point)["v"]
        return float(v @ v)

    def derivative(self, space, u, rule=None):
        v = space.evaluate_at_point(u, self.point)["v"]
        return 2.0 * (
            v[0] * space.point_evaluation_vector(FIELD_VX, self.point)
            + v[1] * space.point_evaluation_vector(FIELD_VY, self.point)
        )

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        v = space.evaluate_at_point(u, self.point)["v"]
        wv = space.evaluate_at_point(w, self.point)["v"]
        self._pu_point(space, self.point, 2.0 * float(v @ wv), node_acc, scale)


@dataclass(frozen=True)
class PressureDifference(_PointGoal):
    point_a: tuple
    point_b: tuple

    def value(self, space, u, rule=None):
        pa = space.evaluate_at_point(u, self.point_a)["p"]
        pb = space.evaluate_at_point(u, self.point_b)["p"]
        return pa - pb

    def derivative(self, space, u, rule=None):
        return space.point_evaluation_vector(FIELD_P, self.point_a) - space.point_evaluation_vector(
            FIELD_P, self.point_b
        )

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        wa = space.evaluate_at_point(w, self.point_a)["p"]
        wb = space.evaluate_at_point(w, self.point_b)["p"]
        self._pu_point(space, self.point_a, wa, node_acc, scale)
        self._pu_point(space, self.point_b, -wb, node_acc, scale)


@dataclass(frozen=True)
class BoundaryHeatFlux:
    """Integral of grad(theta).n over the whole boundary (snapped-polygon normals)."""

    def _faces(self, space, rule):
        n1d = int(round(np.sqrt(rule.n_points)))
        return space.boundary_face_data(n1d)

    def value(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        kt = space.degrees.temperature
        total = 0.0
        for face in self._faces(space, rule):
            vals = self._grad_dot_n(space, u, face, kt)
            total += float(np.sum(vals * face["weights"]))
        return total

    def _grad_dot_n(self, space, u, face, degree):
        vals, grads = _face_tabulation(
            degree, face["edge"], len(face["weights"]), face["ref_points"]
        )
        row = space.scalar[FIELD_T].row_of_cell(face["cell"])
        coeffs = u[space.field_cell_dofs(FIELD_T)[row]]
        gref = np.einsum("b,bqr->qr", coeffs, grads)
        jac_inv_T = _face_jacobians(face)
        gphys = np.einsum("qij,qj->qi", jac_inv_T, gref)
        return gphys @ face["normal"]

    def derivative(self, space, u, rule=None):
        rule = rule or space.assembly_rule()
        kt = space.degrees.temperature
        out = np.zeros(space.n_dofs)
        tdofs = space.field_cell_dofs(FIELD_T)
        for face in self._faces(space, rule):
            vals, grads = _face_tabulation(
                kt, face["edge"], len(face["weights"]), face["ref_points"]
            )
            jac_inv_T = _face_jacobians(face)
            gphys = np.einsum("qij,bqj->bqi", jac_inv_T, grads)
            gn = gphys @ face["normal"]  # (nb, nq)
            row = space.scalar[FIELD_T].row_of_cell(face["cell"])
            np.add.at(out, tdofs[row], gn @ face["weights"])
        return out

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        kt = space.degrees.temperature
        tdofs = space.field_cell_dofs(FIELD_T)
        mesh = space.mesh
        for face in self._faces(space, rule):
            vals, grads = _face_tabulation(
                kt, face["edge"], len(face["weights"]), face["ref_points"]
            )
            row = space.scalar[FIELD_T].row_of_cell(face["cell"])
            coeffs = w[tdofs[row]]
            wq = coeffs @ vals
            jac_inv_T = _face_jacobians(face)
            gw = np.einsum("qij,qj->qi", jac_inv_T, np.einsum("b,bqr->qr", coeffs, grads))
            pu_vals, pu_grads = _face_tabulation(
                1, face["edge"], len(face["weights"]), face["ref_points"]
            )
            gpu = np.einsum("qij,aqj->aqi", jac_inv_T, pu_grads)
            vids = mesh.cells[face["cell"]].vertex_ids
            n = face["normal"]
            for a in range(4):
                integrand = (gw @ n) * pu_vals[a] + wq * (gpu[a] @ n)
                node_acc[vids[a]] += scale * float(np.sum(integrand * face["weights"]))


def _face_jacobians(face):
    corners = face["corners"]
    pts = face["ref_points"]
    s, t = pts[:, 0], pts[:, 1]
    dshape = np.stack(
        [
            np.stack([-(1 - t), (1 - t), t, -t], axis=0),
            np.stack([-(1 - s), -s, s, (1 - s)], axis=0),
        ],
        axis=2,
    )  # (4, nq, 2)
    jac = np.einsum("ad,aqr->qdr", corners, dshape)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1]
    inv[:, 1, 1] = jac[:, 0, 0]
    inv[:, 0, 1] = -jac[:, 0, 1]
    inv[:, 1, 0] = -jac[:, 1, 0]
    inv /= det[:, None, None]
    return np.swapaxes(inv, 1, 2)


# -- combined functional -------------------------------------------------------


@dataclass
class GoalSet:
    """Goals plus the signed weights of the combined functional."""

    goals: list
    user_weights: np.ndarray  # omega_i
    signed_weights: np.ndarray  # w_i = omega_i * sign(J_i(U2) - J_i(U~))
    values_low: np.ndarray
    values_enriched: np.ndarray

    @property
    def combined_error(self):
        """J_c(U2) - J_c(U~); by construction the sum of weighted magnitudes."""
        return float(np.dot(self.signed_weights, self.values_enriched - self.values_low))

    def combined_derivative(self, space, u, rule=None):
        out = np.zeros(space.n_dofs)
        for w_i, goal in zip(self.signed_weights, self.goals):
            if w_i != 0.0:
                out += w_i * goal.derivative(space, u, rule=rule)
        return out

    def pu_pairing(self, space, u, w, node_acc, scale, rule):
        for w_i, goal in zip(self.signed_weights, self.goals):
            if w_i != 0.0:
                goal.pu_pairing(space, u, w, node_acc, scale * w_i, rule)


def combine(goals, values_low, values_enriched, vanish_threshold=1e-12):
    """Signed-weight combination that prevents error cancellation.

    omega_i = 1/|J_i(U~)| for non-vanishing functionals, 1 otherwise;
    w_i = omega_i * sign(J_i(U2) - J_i(U~)), with sign taken as +1 when the
    difference vanishes exactly.
    """
    values_low = np.asarray(values_low, dtype=float)
    values_enriched = np.asarray(values_enriched, dtype=float)
    if not (len(goals) == values_low.size == values_enriched.size):
        raise ValueError("goal and value lists must align")
    with np.errstate(divide="ignore"):
        omega = np.where(
            np.abs(values_low) > vanish_threshold, 1.0 / np.abs(values_low), 1.0
        )
    diff = values_enriched - values_low
    sign = np.where(diff == 0.0, 1.0, np.sign(diff))
    return GoalSet(
        goals=list(goals),
        user_weights=omega,
        signed_weights=omega * sign,
        values_low=values_low,
        values_enriched=values_enriched,
    )


def evaluate_all(goals, space, u, rule=None):
    return np.array([g.value(space, u, rule=rule) for g in goals])
