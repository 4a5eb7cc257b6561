"""Continuous tensor-product Lagrange spaces on adaptive quad meshes.

Fields are (vx, vy, p, theta); the two velocity components share one scalar
numbering. Hanging-node dofs are constrained to the trace of the coarse
neighbor, Dirichlet dofs carry inhomogeneities, and the whole constraint set
is closed transitively so every master is a genuinely free dof.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import mesh as meshmod

FIELD_VX, FIELD_VY, FIELD_P, FIELD_T = 0, 1, 2, 3
FIELD_NAMES = ("vx", "vy", "p", "theta")


@dataclass(frozen=True)
class DegreeTriple:
    velocity: int = 2
    pressure: int = 1
    temperature: int = 1

    def __post_init__(self):
        if min(self.velocity, self.pressure, self.temperature) < 1:
            raise ValueError("all degrees must be >= 1")
        if self.velocity <= self.pressure:
            raise ValueError(
                "velocity degree must exceed pressure degree (inf-sup stability)"
            )

    def field_degrees(self):
        return (self.velocity, self.velocity, self.pressure, self.temperature)

    def enriched(self):
        return DegreeTriple(2 * self.velocity, 2 * self.pressure, 2 * self.temperature)


# -- reference element -------------------------------------------------------


def lagrange_1d(degree, x):
    """Values and derivatives of the 1D Lagrange basis on equispaced nodes.

    Returns (values, derivs), each of shape (degree+1, len(x)).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nodes = np.linspace(0.0, 1.0, degree + 1)
    n = degree + 1
    vals = np.ones((n, x.size))
    ders = np.zeros((n, x.size))
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            vals[i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
        for m in range(n):
            if m == i:
                continue
            term = np.ones(x.size) / (nodes[i] - nodes[m])
            for j in range(n):
                if j in (i, m):
                    continue
                term *= (x - nodes[j]) / (nodes[i] - nodes[j])
            ders[i] += term
    return vals, ders


class ReferenceElement:
    """Q_k basis on the unit square, nodes in lexicographic (ix + iy*(k+1)) order."""

    def __init__(self, degree):
        self.degree = degree
        self.n_basis = (degree + 1) ** 2
        g = np.linspace(0.0, 1.0, degree + 1)
        gx, gy = np.meshgrid(g, g)
        self.nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def tabulate(self, points):
        """Basis values (nb, nq) and reference gradients (nb, nq, 2)."""
        points = np.asarray(points, dtype=float)
        vx, dx = lagrange_1d(self.degree, points[:, 0])
        vy, dy = lagrange_1d(self.degree, points[:, 1])
        n1 = self.degree + 1
        nb, nq = self.n_basis, points.shape[0]
        vals = np.empty((nb, nq))
        grads = np.empty((nb, nq, 2))
        for iy in range(n1):
            for ix in range(n1):
                b = iy * n1 + ix
                vals[b] = vx[ix] * vy[iy]
                grads[b, :, 0] = dx[ix] * vy[iy]
                grads[b, :, 1] = vx[ix] * dy[iy]
        return vals, grads

    # local node indices on the cell boundary, following the CCW edge ordering
    def corner_locals(self):
        k = self.degree
        return [0, k, (k + 1) ** 2 - 1, k * (k + 1)]

    def edge_interior_locals(self, e):
        """Interior node ids along CCW edge e, ordered tail corner -> head corner."""
        k = self.degree
        n1 = k + 1
        if e == 0:
            return [ix for ix in range(1, k)]
        if e == 1:
            return [k + iy * n1 for iy in range(1, k)]
        if e == 2:
            return [k * n1 + ix for ix in range(k - 1, 0, -1)]
        if e == 3:
            return [iy * n1 for iy in range(k - 1, 0, -1)]
        raise ValueError(f"bad edge index {e}")

    def face_locals(self, e):
        c = self.corner_locals()
        return [c[e]] + self.edge_interior_locals(e) + [c[(e + 1) % 4]]


_REF_CACHE = {}


def reference_element(degree):
    if degree not in _REF_CACHE:
        _REF_CACHE[degree] = ReferenceElement(degree)
    return _REF_CACHE[degree]


_HANGING_TABLE_CACHE = {}


def _hanging_weight_table(degree):
    if degree not in _HANGING_TABLE_CACHE:
        s = np.arange(1, 2 * degree) / (2 * degree)
        vals, _ = lagrange_1d(degree, s)
        _HANGING_TABLE_CACHE[degree] = vals  # (degree+1, 2*degree-1)
    return _HANGING_TABLE_CACHE[degree]


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss rule on the unit square; weights sum to one."""

    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)

    @property
    def n_points(self):
        return self.points.shape[0]


def gauss_1d(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


_RULE_CACHE = {}


def tensor_gauss_rule(n_per_axis):
    if n_per_axis not in _RULE_CACHE:
        x, w = gauss_1d(n_per_axis)
        px, py = np.meshgrid(x, x)
        wx, wy = np.meshgrid(w, w)
        _RULE_CACHE[n_per_axis] = QuadratureRule(
            np.column_stack([px.ravel(), py.ravel()]), (wx * wy).ravel()
        )
    return _RULE_CACHE[n_per_axis]


def quadrature_for(degrees, nonlinearity_boost=0):
    """Tensor Gauss rule with (max degree + 1 + boost) points per axis."""
    if nonlinearity_boost < 0:
        raise ValueError("boost must be >= 0")
    n = max(degrees.field_degrees()) + 1 + nonlinearity_boost
    return tensor_gauss_rule(n)


# -- constraints --------------------------------------------------------------


class ConstraintSet:
    """Map from constrained dofs to master weights plus an inhomogeneity.

    After construction the set is closed: masters are never constrained.
    ``distribute`` overwrites constrained entries from their masters and is
    idempotent.
    """

    def __init__(self, n_dofs, entries):
        self.n_dofs = n_dofs
        self.entries = self._close(entries)
        self.constrained_mask = np.zeros(n_dofs, dtype=bool)
        for dof in self.entries:
            self.constrained_mask[dof] = True
        rows, cols, vals = [], [], []
        self.inhomogeneity = np.zeros(n_dofs)
        free = np.nonzero(~self.constrained_mask)[0]
        rows.extend(free)
        cols.extend(free)
        vals.extend(np.ones(free.size))
        for dof, (masters, g) in self.entries.items():
            self.inhomogeneity[dof] = g
            for m, w in masters:
                rows.append(dof)
                cols.append(m)
                vals.append(w)
        self.T = sp.csr_matrix(
            (np.array(vals), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
            shape=(n_dofs, n_dofs),
        )
        self._diag_c = sp.diags(self.constrained_mask.astype(float), format="csr")

    @staticmethod
    def _close(entries):
        closed = {}
        for dof, (masters, g) in entries.items():
            depth = 0
            masters = list(masters)
            g = float(g)
            while any(m in entries for m, _ in masters):
                depth += 1
                if depth > 50:
                    raise RuntimeError(
                        "constraint closure did not terminate; mesh violates 1-irregularity"
                    )
                nxt = []
                for m, w in masters:
                    if m in entries:
                        sub_masters, sub_g = entries[m]
                        g += w * sub_g
                        nxt.extend((sm, w * sw) for sm, sw in sub_masters)
                    else:
                        nxt.append((m, w))
                masters = nxt
            merged = {}
            for m, w in masters:
                merged[m] = merged.get(m, 0.0) + w
            closed[dof] = (
                [(m, w) for m, w in sorted(merged.items()) if abs(w) > 1e-14],
                g,
            )
        return closed

    @property
    def n_constrained(self):
        return len(self.entries)

    def distribute(self, u):
        """Overwrite constrained entries from masters plus inhomogeneity."""
        return self.T @ np.asarray(u, dtype=float) + self.inhomogeneity

    def homogenize(self, u):
        """Like distribute but with zero inhomogeneities (for increments)."""
        return self.T @ np.asarray(u, dtype=float)

    def condense_residual(self, r):
        """Accumulate constrained-row contributions onto masters; rows of
        constrained dofs come out zero."""
        return self.T.T @ np.asarray(r, dtype=float)

    def condense_matrix(self, A):
        """T^T A T plus unit diagonal on constrained dofs (keeps it regular)."""
        return (self.T.T @ A @ self.T + self._diag_c).tocsc()


# -- scalar numbering ---------------------------------------------------------


class ScalarNumbering:
    """Global dof numbering for one scalar Q_k field on the active cells."""

    def __init__(self, mesh, degree):
        self.mesh = mesh
        self.degree = degree
        ref = reference_element(degree)
        k = degree
        active = [int(i) for i in mesh.active_cell_ids()]
        self.active_ids = np.array(active, dtype=np.int64)
        nb = ref.n_basis
        self.cell_dofs = np.empty((len(active), nb), dtype=np.int64)
        vertex_dof = {}
        edge_dofs = {}
        n = 0
        corner_locals = ref.corner_locals()
        for row, cid in enumerate(active):
            vids = mesh.cells[cid].vertex_ids
            for c in range(4):
                v = vids[c]
                if v not in vertex_dof:
                    vertex_dof[v] = n
                    n += 1
                self.cell_dofs[row, corner_locals[c]] = vertex_dof[v]
            if k > 1:
                for e, (a, b) in enumerate(mesh.cell_edges(cid)):
                    key = (a, b) if a < b else (b, a)
                    if key not in edge_dofs:
                        edge_dofs[key] = list(range(n, n + k - 1))
                        n += k - 1
                    dofs = edge_dofs[key]
                    ordered = dofs if a < b else dofs[::-1]
                    locs = ref.edge_interior_locals(e)
                    for loc, d in zip(locs, ordered):
                        self.cell_dofs[row, loc] = d
            if k > 1:
                n1 = k + 1
                interior = [
                    iy * n1 + ix for iy in range(1, k) for ix in range(1, k)
                ]
                for loc in interior:
                    self.cell_dofs[row, loc] = n
                    n += 1
        self.n_dofs = n
        self.vertex_dof = vertex_dof
        self.edge_dofs = edge_dofs
        self._row_of_cell = {cid: row for row, cid in enumerate(active)}

    def row_of_cell(self, cid):
        return self._row_of_cell[cid]

    def hanging_constraints(self):
        """(constrained dof, [(master dof, weight)]) from 1-irregular faces."""
        k = self.degree
        # coarse-edge basis at the fine-side node positions j/(2k), j = 1..2k-1
        table = _hanging_weight_table(k)
        out = []
        for cid, _e, (a, b), m in self.mesh.hanging_faces():
            cmin, cmax = (a, b) if a < b else (b, a)
            masters = (
                [self.vertex_dof[cmin]]
                + self.edge_dofs.get((cmin, cmax), [])
                + [self.vertex_dof[cmax]]
            )

            def coarse_weights(j2k):
                return [
                    (md, float(w))
                    for md, w in zip(masters, table[:, j2k - 1])
                    if abs(w) > 1e-14
                ]

            s_of = {cmin: 0, cmax: 2 * k, m: k}  # positions in units of 1/(2k)
            if m in self.vertex_dof:
                out.append((self.vertex_dof[m], coarse_weights(k)))
            if k > 1:
                for x, y in ((a, m), (m, b)):
                    key = (x, y) if x < y else (y, x)
                    sub = self.edge_dofs.get(key)
                    if sub is None:
                        continue
                    s0, s1 = s_of[key[0]], s_of[key[1]]
                    for j, dof in enumerate(sub, start=1):
                        step = (s1 - s0) // k
                        out.append((dof, coarse_weights(s0 + j * step)))
        return out

    def boundary_dofs(self):
        ref = reference_element(self.degree)
        dofs = set()
        for cid, e in self.mesh.boundary_faces():
            row = self._row_of_cell[cid]
            for loc in ref.face_locals(e):
                dofs.add(int(self.cell_dofs[row, loc]))
        return sorted(dofs)


# -- geometry factors ---------------------------------------------------------


class CellGeometry:
    """Bilinear-map factors of all active cells at the points of one rule."""

    def __init__(self, mesh, rule):
        corners = mesh.active_coords()  # (nc, 4, 2)
        pts = rule.points
        s, t = pts[:, 0], pts[:, 1]
        shape = np.stack(
            [(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=0
        )  # (4, nq)
        dshape = np.stack(
            [
                np.stack([-(1 - t), (1 - t), t, -t], axis=0),
                np.stack([-(1 - s), -s, s, (1 - s)], axis=0),
            ],
            axis=2,
        )  # (4, nq, 2)
        self.qpoints = np.einsum("aq,cad->cqd", shape, corners)
        jac = np.einsum("cad,aqr->cqdr", corners, dshape)  # dx_d / dxi_r
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        if np.any(det <= 0):
            raise RuntimeError("non-positive cell Jacobian encountered")
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1]
        inv[..., 1, 1] = jac[..., 0, 0]
        inv[..., 0, 1] = -jac[..., 0, 1]
        inv[..., 1, 0] = -jac[..., 1, 0]
        inv /= det[..., None, None]
        self.jac_inv_T = np.swapaxes(inv, 2, 3).copy()
        self.jxw = det * rule.weights[None, :]


# -- the mixed space ----------------------------------------------------------


class Space:
    """Mixed finite element space (vx, vy, p, theta) with constraints."""

    def __init__(self, mesh, degrees, dirichlet, pin_pressure=True):
        self.mesh = mesh
        self.degrees = degrees
        self.dirichlet = dict(dirichlet)
        kv, kp, kt = degrees.velocity, degrees.pressure, degrees.temperature
        numberings = {kv: ScalarNumbering(mesh, kv)}
        if kp not in numberings:
            numberings[kp] = ScalarNumbering(mesh, kp)
        if kt not in numberings:
            numberings[kt] = ScalarNumbering(mesh, kt)
        self.scalar = [numberings[kv], numberings[kv], numberings[kp], numberings[kt]]
        sizes = [s.n_dofs for s in self.scalar]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_dofs = int(self.offsets[-1])

        entries = {}
        for f in range(4):
            off = int(self.offsets[f])
            for dof, masters in self.scalar[f].hanging_constraints():
                entries[off + dof] = ([(off + m, w) for m, w in masters], 0.0)
        vel_value = float(self.dirichlet.get("velocity", 0.0))
        theta_value = float(self.dirichlet.get("temperature", 0.0))
        for f, value in ((FIELD_VX, vel_value), (FIELD_VY, vel_value), (FIELD_T, theta_value)):
            off = int(self.offsets[f])
            for dof in self.scalar[f].boundary_dofs():
                entries[off + dof] = ([], value)
        if pin_pressure:
            entries[int(self.offsets[FIELD_P])] = ([], 0.0)
        self.constraints = ConstraintSet(self.n_dofs, entries)
        self._geom_cache = {}
        self._basis_cache = {}

    def field_cell_dofs(self, f):
        return self.scalar[f].cell_dofs + int(self.offsets[f])

    def field_slice(self, f):
        return slice(int(self.offsets[f]), int(self.offsets[f + 1]))

    def assembly_rule(self, boost=2):
        return quadrature_for(self.degrees, boost)

    def geometry(self, rule):
        key = id(rule)
        if key not in self._geom_cache:
            self._geom_cache[key] = CellGeometry(self.mesh, rule)
        return self._geom_cache[key]

    def basis(self, degree, rule):
        key = (degree, id(rule))
        if key not in self._basis_cache:
            self._basis_cache[key] = reference_element(degree).tabulate(rule.points)
        return self._basis_cache[key]

    def zero_state(self):
        """All-zero vector with Dirichlet inhomogeneities applied."""
        return self.constraints.distribute(np.zeros(self.n_dofs))

    def constant_state(self, vx=0.0, vy=0.0, p=0.0, theta=0.0):
        """Fieldwise-constant vector, constraints applied afterwards."""
        u = np.empty(self.n_dofs)
        for f, val in zip(range(4), (vx, vy, p, theta)):
            u[self.field_slice(f)] = val
        return self.constraints.distribute(u)

    # -- field evaluation at quadrature points ------------------------------

    def eval_fields(self, u, rule):
        """Values and gradients of all fields at the rule's points.

        Returns a dict with v (nc,nq,2), grad_v (nc,nq,2,2) where
        grad_v[...,i,j] = dv_i/dx_j, p (nc,nq), theta (nc,nq),
        grad_theta (nc,nq,2).
        """
        geom = self.geometry(rule)
        out = {}
        vx, gvx = self._field_values(u, FIELD_VX, rule, geom)
        vy, gvy = self._field_values(u, FIELD_VY, rule, geom)
        out["v"] = np.stack([vx, vy], axis=-1)
        out["grad_v"] = np.stack([gvx, gvy], axis=-2)
        out["p"], _ = self._field_values(u, FIELD_P, rule, geom, gradients=False)
        out["theta"], out["grad_theta"] = self._field_values(u, FIELD_T, rule, geom)
        return out

    def _field_values(self, u, f, rule, geom, gradients=True):
        vals, grads = self.basis(self.degrees.field_degrees()[f], rule)
        coeffs = u[self.field_cell_dofs(f)]  # (nc, nb)
        vq = coeffs @ vals  # (nc, nq)
        if not gradients:
            return vq, None
        gref = np.einsum("cb,bqr->cqr", coeffs, grads)
        gphys = np.einsum("cqij,cqj->cqi", geom.jac_inv_T, gref)
        return vq, gphys

    # -- point evaluation ----------------------------------------------------

    def evaluate_at_point(self, u, point):
        """Field values and gradients at one physical point."""
        cid, ref = self.mesh.locate(point)
        return self._evaluate_local(u, cid, ref)

    def _evaluate_local(self, u, cid, ref):
        corners = self.mesh.cell_coords(cid)
        s, t = ref
        dshape = np.array(
            [[-(1 - t), -(1 - s)], [(1 - t), -s], [t, s], [-t, (1 - s)]]
        )
        jac = corners.T @ dshape
        jac_inv_T = np.linalg.inv(jac).T
        out = {}
        grads = {}
        for f in range(4):
            deg = self.degrees.field_degrees()[f]
            refel = reference_element(deg)
            vals, gref = refel.tabulate(ref[None, :])
            row = self.scalar[f].row_of_cell(cid)
            coeffs = u[self.field_cell_dofs(f)[row]]
            out[FIELD_NAMES[f]] = float(coeffs @ vals[:, 0])
            grads[FIELD_NAMES[f]] = jac_inv_T @ (coeffs @ gref[:, 0, :])
        return {
            "v": np.array([out["vx"], out["vy"]]),
            "grad_v": np.stack([grads["vx"], grads["vy"]], axis=0),
            "p": out["p"],
            "grad_p": grads["p"],
            "theta": out["theta"],
            "grad_theta": grads["theta"],
        }

    def point_evaluation_vector(self, field, point):
        """Vector j with j[i] = phi_i(point) for the given field's basis."""
        cid, ref = self.mesh.locate(point)
        f = field
        deg = self.degrees.field_degrees()[f]
        vals, _ = reference_element(deg).tabulate(ref[None, :])
        row = self.scalar[f].row_of_cell(cid)
        vec = np.zeros(self.n_dofs)
        np.add.at(vec, self.field_cell_dofs(f)[row], vals[:, 0])
        return vec

    # -- boundary faces ------------------------------------------------------

    def boundary_face_data(self, n_points_1d):
        """Quadrature data on all boundary faces.

        Returns a list of dicts with the owning cell row (per scalar space the
        caller indexes), physical points, outward unit normals, and weights
        (already scaled by arc length element).
        """
        x1, w1 = gauss_1d(n_points_1d)
        faces = []
        edge_param = {
            0: lambda t: np.column_stack([t, np.zeros_like(t)]),
            1: lambda t: np.column_stack([np.ones_like(t), t]),
            2: lambda t: np.column_stack([1.0 - t, np.ones_like(t)]),
            3: lambda t: np.column_stack([np.zeros_like(t), 1.0 - t]),
        }
        for cid, e in self.mesh.boundary_faces():
            ref_pts = edge_param[e](x1)
            corners = self.mesh.cell_coords(cid)
            a, b = self.mesh.cell_edges(cid)[e]
            va = np.array([self.mesh.vertices[a].x, self.mesh.vertices[a].y])
            vb = np.array([self.mesh.vertices[b].x, self.mesh.vertices[b].y])
            tangent = vb - va
            length = float(np.hypot(*tangent))
            tangent /= length
            normal = np.array([tangent[1], -tangent[0]])  # outward for CCW cells
            faces.append(
                {
                    "cell": cid,
                    "edge": e,
                    "ref_points": ref_pts,
                    "phys_points": va[None, :] + np.outer(x1, vb - va),
                    "normal": normal,
                    "weights": w1 * length,
                    "corners": corners,
                }
            )
        return faces


def build_space(mesh, degrees, dirichlet, pin_pressure=True):
    """Assemble the mixed space with hanging-node and Dirichlet constraints."""
    return Space(mesh, degrees, dirichlet, pin_pressure=pin_pressure)


# -- inter-space transfer -----------------------------------------------------


def embed(coarse, fine, u, homogeneous=False):
    """Represent a coarse-space function exactly in the fine space (same mesh).

    With ``homogeneous`` the fine constraints are applied without Dirichlet
    inhomogeneities (embedding adjoint states or increments).
    """
    if coarse.mesh is not fine.mesh:
        raise ValueError("embed requires both spaces on the same mesh")
    cdeg = coarse.degrees.field_degrees()
    fdeg = fine.degrees.field_degrees()
    if any(c > f for c, f in zip(cdeg, fdeg)):
        raise ValueError("fine space degrees must dominate coarse degrees")
    out = np.zeros(fine.n_dofs)
    for f in range(4):
        refc = reference_element(cdeg[f])
        reff = reference_element(fdeg[f])
        P, _ = refc.tabulate(reff.nodes)  # (nb_coarse, nb_fine)
        coeffs = u[coarse.field_cell_dofs(f)]  # (nc, nbc)
        fine_vals = coeffs @ P  # (nc, nbf)
        fdofs = fine.field_cell_dofs(f)
        out[fdofs.ravel()] = fine_vals.ravel()
    if homogeneous:
        return fine.constraints.homogenize(out)
    return fine.constraints.distribute(out)


def restrict_nodal(fine, coarse, u):
    """Nodal interpolation back onto the coarse space (same mesh)."""
    if coarse.mesh is not fine.mesh:
        raise ValueError("restrict requires both spaces on the same mesh")
    out = np.zeros(coarse.n_dofs)
    for f in range(4):
        reff = reference_element(fine.degrees.field_degrees()[f])
        refc = reference_element(coarse.degrees.field_degrees()[f])
        P, _ = reff.tabulate(refc.nodes)
        coeffs = u[fine.field_cell_dofs(f)]
        coarse_vals = coeffs @ P
        cdofs = coarse.field_cell_dofs(f)
        out[cdofs.ravel()] = coarse_vals.ravel()
    return coarse.constraints.distribute(out)


_QUADRANT_OFFSET = {0: (0.0, 0.0), 1: (0.5, 0.0), 2: (0.5, 0.5), 3: (0.0, 0.5)}


def interpolate_to_refined(old_space, new_space, u):
    """Transfer a solution onto a refinement of its mesh (nodal, cheap).

    Exact on the square geometry; on the snapped disc boundary it is the
    reference-space prolongation, which is a slight approximation there.
    """
    old_mesh, new_mesh = old_space.mesh, new_space.mesh
    n_old_cells = len(old_mesh.cells)
    out = np.zeros(new_space.n_dofs)
    deg_old = old_space.degrees.field_degrees()
    deg_new = new_space.degrees.field_degrees()
    chains = {}
    for cid in (int(i) for i in new_mesh.active_cell_ids()):
        chain = []
        cur = cid
        while cur >= n_old_cells or not old_mesh.cells[cur].active:
            parent = new_mesh.cells[cur].parent
            quadrant = new_mesh.cells[parent].children.index(cur)
            chain.append(quadrant)
            cur = parent
        chains[cid] = (cur, tuple(chain[::-1]))
    tab_cache = {}
    for f in range(4):
        nodes = reference_element(deg_new[f]).nodes
        old_dofs = old_space.field_cell_dofs(f)
        new_dofs = new_space.field_cell_dofs(f)
        refel_old = reference_element(deg_old[f])
        key_f = (deg_old[f], deg_new[f])
        for cid, (ancestor, chain) in chains.items():
            tab_key = (key_f, chain)
            vals = tab_cache.get(tab_key)
            if vals is None:
                pts = nodes.copy()
                for quadrant in reversed(chain):
                    dx, dy = _QUADRANT_OFFSET[quadrant]
                    pts = 0.5 * pts + np.array([dx, dy])
                vals, _ = refel_old.tabulate(pts)
                tab_cache[tab_key] = vals
            row_old = old_space.scalar[f].row_of_cell(ancestor)
            row_new = new_space.scalar[f].row_of_cell(cid)
            out[new_dofs[row_new]] = u[old_dofs[row_old]] @ vals
    return new_space.constraints.distribute(out)
