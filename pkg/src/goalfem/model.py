"""Material laws, laser sources, and nonlinear residual/Jacobian assembly.

The Density model is the full coupled system: Navier-Stokes momentum with a
temperature-dependent product viscosity nu(theta)*rho(theta), a continuity
equation carrying the density variation, and an advection-diffusion energy
equation driven by Gaussian laser sources. The Boussinesq variant freezes the
density everywhere except in the buoyancy force, and LinearVerification is a
decoupled Stokes + Poisson system used to exercise estimator exactness.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import FIELD_P, FIELD_T, FIELD_VX, FIELD_VY


class NonphysicalTemperatureError(RuntimeError):
    """Temperature hit zero or below at an evaluation point."""


# water thermal expansion coefficient, knots in degrees Celsius
_ALPHA_TABLE_C = np.array(
    [0.0, 4.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0,
     60.0, 70.0, 80.0, 90.0, 99.63]
)
_ALPHA_TABLE_VALUES = 1e-3 * np.array(
    [-0.08, 0.0, 0.011, 0.087, 0.152, 0.209, 0.259, 0.305, 0.347, 0.386,
     0.423, 0.457, 0.522, 0.583, 0.64, 0.696, 0.748]
)

CELSIUS_OFFSET = 273.15


class AlphaSpline:
    """Piecewise-linear thermal expansion coefficient alpha(theta).

    Knots are stored in Kelvin. Outside the table the spline is extrapolated
    linearly with the boundary slopes. The antiderivative used by the density
    law is the exact piecewise quadratic. At knots the slope follows the
    left-segment convention.
    """

    def __init__(self, knots_kelvin, values):
        self.knots = np.asarray(knots_kelvin, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.knots.ndim != 1 or self.knots.size < 2:
            raise ValueError("need at least two spline knots")
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("spline knots must be strictly increasing")
        self.slopes = np.diff(self.values) / np.diff(self.knots)
        # cumulative integral of alpha from the first knot to each knot
        seg = 0.5 * (self.values[:-1] + self.values[1:]) * np.diff(self.knots)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    @classmethod
    def water(cls):
        return cls(_ALPHA_TABLE_C + CELSIUS_OFFSET, _ALPHA_TABLE_VALUES.copy())

    def _segment(self, theta):
        idx = np.searchsorted(self.knots, theta, side="left")
        return np.clip(idx - 1, 0, self.knots.size - 2)

    def alpha(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._segment(theta)
        return self.values[s] + self.slopes[s] * (theta - self.knots[s])

    def alpha_prime(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.slopes[self._segment(theta)]

    def integral(self, theta, theta0):
        """Exact integral of alpha from theta0 to theta."""
        return self._antiderivative(theta) - self._antiderivative(theta0)

    def _antiderivative(self, theta):
        theta = np.asarray(theta, dtype=float)
        s = self._segment(theta)
        d = theta - self.knots[s]
        return self.cum[s] + self.values[s] * d + 0.5 * self.slopes[s] * d * d


@dataclass(frozen=True)
class MaterialParams:
    rho0: float = 998.21
    nu0: float = 2.216065960663198e-6
    activation_energy: float = 14906.585117275014
    gas_constant: float = 8.31446261815324
    k_thermal: float = 0.5918
    theta_ref: float = 293.15
    gravity: tuple = (0.0, -9.81)

    def __post_init__(self):
        if min(self.rho0, self.nu0, self.k_thermal, self.theta_ref) <= 0:
            raise ValueError("rho0, nu0, k_thermal and theta_ref must be positive")


class ModelKind(enum.Enum):
    DENSITY = "density"
    BOUSSINESQ = "boussinesq"
    LINEAR_VERIFICATION = "linear"


@dataclass(frozen=True)
class LaserSource:
    """Sum of isotropic 2D Gaussians: amplitude * (2 pi sigma^2)^-1 * exp(-|x-c|^2 / 2 sigma^2)."""

    centers: tuple
    amplitudes: tuple
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(self.centers) != len(self.amplitudes):
            raise ValueError("one amplitude per center required")


def source_eval(src, x):
    """Laser power density at point(s) x; x may be (..., 2)."""
    if src is None:
        return np.zeros(np.asarray(x, dtype=float).shape[:-1])
    x = np.asarray(x, dtype=float)
    norm = 1.0 / (2.0 * np.pi * src.sigma**2)
    out = np.zeros(x.shape[:-1])
    for c, amp in zip(src.centers, src.amplitudes):
        d2 = np.sum((x - np.asarray(c, dtype=float)) ** 2, axis=-1)
        out = out + amp * norm * np.exp(-d2 / (2.0 * src.sigma**2))
    return out


def material_eval(params, spline, theta):
    """Material laws at temperature theta (Kelvin).

    Returns (alpha, integral of alpha from theta_ref, rho, rho', nu, nu').
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise NonphysicalTemperatureError(
            f"temperature must be positive, min value {float(np.min(theta))}"
        )
    alpha = spline.alpha(theta)
    integral = spline.integral(theta, params.theta_ref)
    rho = params.rho0 * np.exp(-integral)
    rho_prime = -alpha * rho
    ea_r = params.activation_energy / params.gas_constant
    nu = params.nu0 * np.exp(ea_r / theta)
    nu_prime = -ea_r / theta**2 * nu
    return alpha, integral, rho, rho_prime, nu, nu_prime


@dataclass(frozen=True)
class Model:
    """Everything the assembly needs besides the space and the state."""

    kind: ModelKind
    params: MaterialParams = field(default_factory=MaterialParams)
    spline: AlphaSpline = field(default_factory=AlphaSpline.water)
    source: LaserSource | None = None
    continuity_sign: str = "as-printed"  # or "conservative"

    def __post_init__(self):
        if self.continuity_sign not in ("as-printed", "conservative"):
            raise ValueError(f"unknown continuity_sign {self.continuity_sign!r}")

    @property
    def _csign(self):
        return -1.0 if self.continuity_sign == "as-printed" else 1.0


def _material_arrays(model, theta):
    """Pointwise coefficient bundle for the assembly; theta any shape."""
    p = model.params
    m = {}
    if model.kind is ModelKind.LINEAR_VERIFICATION:
        # constant coefficients; no temperature-dependent law to protect
        one = np.ones_like(theta)
        m["visc"] = p.nu0 * p.rho0 * one
        m["rho"] = p.rho0 * one
        return m
    if np.any(theta <= 0):
        raise NonphysicalTemperatureError(
            f"temperature must be positive, min value {float(np.min(theta))}"
        )
    spline = model.spline
    alpha = spline.alpha(theta)
    alpha_p = spline.alpha_prime(theta)
    ea_r = p.activation_energy / p.gas_constant
    nu = p.nu0 * np.exp(ea_r / theta)
    nu_p = -ea_r / theta**2 * nu
    m["alpha"] = alpha
    m["alpha_prime"] = alpha_p
    m["nu"] = nu
    m["nu_prime"] = nu_p
    if model.kind is ModelKind.DENSITY:
        rho = p.rho0 * np.exp(-spline.integral(theta, p.theta_ref))
        rho_p = -alpha * rho
        m["rho"] = rho
        m["rho_prime"] = rho_p
        m["rho_pp"] = (alpha * alpha - alpha_p) * rho
        m["visc"] = nu * rho
        m["visc_prime"] = nu_p * rho + nu * rho_p
    else:  # Boussinesq: constant density outside buoyancy
        m["rho"] = p.rho0 * np.ones_like(theta)
        m["visc"] = nu * p.rho0
        m["visc_prime"] = nu_p * p.rho0
    return m


# -- pointwise weak forms -----------------------------------------------------


def residual_form_values(model, F, fsrc, test):
    """Integrand of A(U)(psi) at quadrature points for pointwise test data.

    F and test are dicts with v, grad_v, p, theta, grad_theta arrays of
    matching leading shape. Returns the integrand without the jxw factor.
    """
    p = model.params
    m = _material_arrays(model, F["theta"])
    g = np.asarray(p.gravity)
    v, gv, theta, gt = F["v"], F["grad_v"], F["theta"], F["grad_theta"]
    D = gv + np.swapaxes(gv, -1, -2)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    conv = np.einsum("...ij,...j->...i", gv, v)

    tv, tgv, tp, tth, tgt = (
        test["v"], test["grad_v"], test["p"], test["theta"], test["grad_theta"],
    )
    tdiv = tgv[..., 0, 0] + tgv[..., 1, 1]

    out = m["visc"] * np.einsum("...ij,...ij->...", D, tgv)
    out = out + F["p"] * tdiv
    if model.kind is ModelKind.LINEAR_VERIFICATION:
        out = out - m["rho"] * np.einsum("i,...i->...", g, tv)
        out = out + m["rho"] * div_v * tp
    else:
        out = out + m["rho"] * np.einsum("...i,...i->...", conv, tv)
        if model.kind is ModelKind.DENSITY:
            out = out - m["rho"] * np.einsum("i,...i->...", g, tv)
            gt_dot_v = np.einsum("...i,...i->...", gt, v)
            out = out + (m["rho"] * div_v + model._csign * m["rho_prime"] * gt_dot_v) * tp
        else:
            buoy = p.rho0 * m["alpha"] * (theta - p.theta_ref)
            out = out - buoy * np.einsum("i,...i->...", g, tv)
            out = out + m["rho"] * div_v * tp
        out = out + np.einsum("...i,...i->...", v, gt) * tth
    out = out + p.k_thermal * np.einsum("...i,...i->...", gt, tgt)
    out = out - fsrc * tth
    return out


def jacobian_form_values(model, F, direction, test):
    """Integrand of A'(U)(direction, test) at quadrature points."""
    p = model.params
    m = _material_arrays(model, F["theta"])
    g = np.asarray(p.gravity)
    v, gv, theta, gt = F["v"], F["grad_v"], F["theta"], F["grad_theta"]
    D = gv + np.swapaxes(gv, -1, -2)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]

    dv, dgv, dp, dth, dgt = (
        direction["v"], direction["grad_v"], direction["p"],
        direction["theta"], direction["grad_theta"],
    )
    tv, tgv, tp, tth, tgt = (
        test["v"], test["grad_v"], test["p"], test["theta"], test["grad_theta"],
    )
    dD = dgv + np.swapaxes(dgv, -1, -2)
    ddiv = dgv[..., 0, 0] + dgv[..., 1, 1]
    tdiv = tgv[..., 0, 0] + tgv[..., 1, 1]

    out = m["visc"] * np.einsum("...ij,...ij->...", dD, tgv)
    out = out + dp * tdiv
    out = out + p.k_thermal * np.einsum("...i,...i->...", dgt, tgt)
    if model.kind is ModelKind.LINEAR_VERIFICATION:
        out = out + m["rho"] * ddiv * tp
        return out

    out = out + m["visc_prime"] * dth * np.einsum("...ij,...ij->...", D, tgv)
    dconv = np.einsum("...ij,...j->...i", dgv, v) + np.einsum("...ij,...j->...i", gv, dv)
    out = out + m["rho"] * np.einsum("...i,...i->...", dconv, tv)
    out = out + (
        np.einsum("...i,...i->...", dv, gt) + np.einsum("...i,...i->...", v, dgt)
    ) * tth

    if model.kind is ModelKind.DENSITY:
        conv = np.einsum("...ij,...j->...i", gv, v)
        out = out + m["rho_prime"] * dth * np.einsum("...i,...i->...", conv, tv)
        out = out - m["rho_prime"] * dth * np.einsum("i,...i->...", g, tv)
        s = model._csign
        gt_dot_v = np.einsum("...i,...i->...", gt, v)
        cont = (
            m["rho"] * ddiv
            + m["rho_prime"] * dth * div_v
            + s * (
                m["rho_pp"] * dth * gt_dot_v
                + m["rho_prime"] * np.einsum("...i,...i->...", dgt, v)
                + m["rho_prime"] * np.einsum("...i,...i->...", gt, dv)
            )
        )
        out = out + cont * tp
    else:  # Boussinesq
        out = out + m["rho"] * ddiv * tp
        buoy_lin = p.rho0 * (m["alpha_prime"] * (theta - p.theta_ref) + m["alpha"]) * dth
        out = out - buoy_lin * np.einsum("i,...i->...", g, tv)
    return out



def _blk(coef, test, trial):
    """Local block B[c,i,j] = sum_q coef[c,q] test[(c,)i,q] trial[(c,)j,q].

    Uses batched matmul so the contraction runs through BLAS.
    """
    lhs = coef[:, None, :] * (test if test.ndim == 3 else test[None, :, :])
    rhs = trial.swapaxes(-1, -2) if trial.ndim == 3 else trial.T
    return lhs @ rhs


# -- global assembly ----------------------------------------------------------

_CHUNK = 1024


def assemble_residual(space, u, model, condense=True, boost=2, rule=None):
    """Residual vector R[i] = A(U)(Phi_i).

    With ``condense`` the constrained rows are accumulated onto their masters
    and zeroed, matching the solver-side convention. Passing ``rule`` lets a
    caller share one quadrature rule across spaces (the estimator needs the
    primal and enriched assemblies to integrate identically).
    """
    rule = rule or space.assembly_rule(boost)
    geom = space.geometry(rule)
    F = space.eval_fields(u, rule)
    m = _material_arrays(model, F["theta"])
    p = model.params
    g = np.asarray(p.gravity)
    fsrc = source_eval(model.source, geom.qpoints)

    v, gv, theta, gt = F["v"], F["grad_v"], F["theta"], F["grad_theta"]
    D = gv + np.swapaxes(gv, 2, 3)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    jxw = geom.jxw
    linear = model.kind is ModelKind.LINEAR_VERIFICATION

    # pointwise dual coefficients: R(psi) = sum_q jxw * (mom_val.psi_v
    #   + mom_grad:grad psi_v + cont*psi_p + eng_val*psi_t + eng_grad.grad psi_t)
    mom_val = np.zeros_like(v)
    if linear:
        mom_val -= m["rho"][..., None] * g
        cont = m["rho"] * div_v
        eng_val = -fsrc
    else:
        conv = np.einsum("cqij,cqj->cqi", gv, v)
        mom_val += m["rho"][..., None] * conv
        if model.kind is ModelKind.DENSITY:
            mom_val -= m["rho"][..., None] * g
            gt_dot_v = np.einsum("cqi,cqi->cq", gt, v)
            cont = m["rho"] * div_v + model._csign * m["rho_prime"] * gt_dot_v
        else:
            buoy = p.rho0 * m["alpha"] * (theta - p.theta_ref)
            mom_val -= buoy[..., None] * g
            cont = m["rho"] * div_v
        eng_val = np.einsum("cqi,cqi->cq", v, gt) - fsrc
    mom_grad = m["visc"][..., None, None] * D
    mom_grad[..., 0, 0] += F["p"]
    mom_grad[..., 1, 1] += F["p"]
    eng_grad = p.k_thermal * gt

    R = np.zeros(space.n_dofs)
    degs = space.degrees.field_degrees()
    pv, gvb = space.basis(degs[FIELD_VX], rule)
    pp, _ = space.basis(degs[FIELD_P], rule)
    pt, gtb = space.basis(degs[FIELD_T], rule)
    dofs_v = [space.field_cell_dofs(FIELD_VX), space.field_cell_dofs(FIELD_VY)]
    dofs_p = space.field_cell_dofs(FIELD_P)
    dofs_t = space.field_cell_dofs(FIELD_T)
    nc = jxw.shape[0]
    for lo in range(0, nc, _CHUNK):
        hi = min(lo + _CHUNK, nc)
        sl = slice(lo, hi)
        jw = jxw[sl]
        Gv = np.einsum("cqij,bqj->cbqi", geom.jac_inv_T[sl], gvb)
        Gt = np.einsum("cqij,bqj->cbqi", geom.jac_inv_T[sl], gtb)
        for c in range(2):
            loc = (mom_val[sl, :, c] * jw) @ pv.T
            loc += np.einsum("cqd,cbqd->cb", mom_grad[sl, :, c, :] * jw[..., None], Gv)
            np.add.at(R, dofs_v[c][sl], loc)
        loc = (cont[sl] * jw) @ pp.T
        np.add.at(R, dofs_p[sl], loc)
        loc = (eng_val[sl] * jw) @ pt.T
        loc += np.einsum("cqd,cbqd->cb", eng_grad[sl] * jw[..., None], Gt)
        np.add.at(R, dofs_t[sl], loc)
    if condense:
        return space.constraints.condense_residual(R)
    return R


def assemble_jacobian(space, u, model, condense=True, boost=2, rule=None):
    """Assembled Gateaux derivative of the residual at state u."""
    rule = rule or space.assembly_rule(boost)
    geom = space.geometry(rule)
    F = space.eval_fields(u, rule)
    m = _material_arrays(model, F["theta"])
    p = model.params
    g = np.asarray(p.gravity)

    v, gv, theta, gt = F["v"], F["grad_v"], F["theta"], F["grad_theta"]
    D = gv + np.swapaxes(gv, 2, 3)
    div_v = gv[..., 0, 0] + gv[..., 1, 1]
    jxw = geom.jxw
    kind = model.kind
    linear = kind is ModelKind.LINEAR_VERIFICATION
    s = model._csign

    degs = space.degrees.field_degrees()
    pv, gvb = space.basis(degs[FIELD_VX], rule)
    pp, _ = space.basis(degs[FIELD_P], rule)
    pt, gtb = space.basis(degs[FIELD_T], rule)
    nbv, nbp, nbt = pv.shape[0], pp.shape[0], pt.shape[0]
    nloc = 2 * nbv + nbp + nbt
    ov = [0, nbv]
    op = 2 * nbv
    ot = 2 * nbv + nbp

    dofs = np.concatenate(
        [
            space.field_cell_dofs(FIELD_VX),
            space.field_cell_dofs(FIELD_VY),
            space.field_cell_dofs(FIELD_P),
            space.field_cell_dofs(FIELD_T),
        ],
        axis=1,
    ).astype(np.int32)

    rows_all, cols_all, data_all = [], [], []
    nc = jxw.shape[0]
    for lo in range(0, nc, _CHUNK):
        hi = min(lo + _CHUNK, nc)
        sl = slice(lo, hi)
        ncH = hi - lo
        jw = jxw[sl]
        Gv = np.einsum("cqij,bqj->cbqi", geom.jac_inv_T[sl], gvb)
        Gt = np.einsum("cqij,bqj->cbqi", geom.jac_inv_T[sl], gtb)
        K = np.zeros((ncH, nloc, nloc))

        visc_jw = m["visc"][sl] * jw
        # velocity-velocity: viscous part, nu*rho*(delta_cd grad.grad + dc phi_j dd phi_i)
        lap = _blk(visc_jw, Gv[..., 0], Gv[..., 0]) + _blk(visc_jw, Gv[..., 1], Gv[..., 1])
        for c in range(2):
            K[:, ov[c] : ov[c] + nbv, ov[c] : ov[c] + nbv] += lap
            for d in range(2):
                K[:, ov[c] : ov[c] + nbv, ov[d] : ov[d] + nbv] += _blk(
                    visc_jw, Gv[..., d], Gv[..., c]
                )
        if not linear:
            rho_jw = m["rho"][sl] * jw
            vdg = np.einsum("cjqk,cqk->cjq", Gv, v[sl])  # v . grad phi_j
            convd = _blk(rho_jw, pv, vdg)
            for c in range(2):
                K[:, ov[c] : ov[c] + nbv, ov[c] : ov[c] + nbv] += convd
                for d in range(2):
                    K[:, ov[c] : ov[c] + nbv, ov[d] : ov[d] + nbv] += _blk(
                        rho_jw * gv[sl, :, c, d], pv, pv
                    )

        # velocity-pressure: (dp, div psi_v)
        for c in range(2):
            K[:, ov[c] : ov[c] + nbv, op : op + nbp] += _blk(jw, Gv[..., c], pp)

        # velocity-temperature
        if not linear:
            for c in range(2):
                coef_g = m["visc_prime"][sl] * jw
                blk = _blk(coef_g * D[sl, :, c, 0], Gv[..., 0], pt)
                blk += _blk(coef_g * D[sl, :, c, 1], Gv[..., 1], pt)
                if kind is ModelKind.DENSITY:
                    conv_c = np.einsum("cqj,cqj->cq", gv[sl, :, c, :], v[sl])
                    coef_v = m["rho_prime"][sl] * (conv_c - g[c]) * jw
                else:
                    coef_v = (
                        -p.rho0
                        * (m["alpha_prime"][sl] * (theta[sl] - p.theta_ref) + m["alpha"][sl])
                        * g[c]
                        * jw
                    )
                blk += _blk(coef_v, pv, pt)
                K[:, ov[c] : ov[c] + nbv, ot : ot + nbt] += blk

        # pressure row (continuity linearization)
        rho_jw = m["rho"][sl] * jw
        for d in range(2):
            blk = _blk(rho_jw, pp, Gv[..., d])
            if kind is ModelKind.DENSITY:
                blk += _blk(s * m["rho_prime"][sl] * gt[sl, :, d] * jw, pp, pv)
            K[:, op : op + nbp, ov[d] : ov[d] + nbv] += blk
        if kind is ModelKind.DENSITY:
            gt_dot_v = np.einsum("cqi,cqi->cq", gt[sl], v[sl])
            coef = (m["rho_prime"][sl] * div_v[sl] + s * m["rho_pp"][sl] * gt_dot_v) * jw
            vdgt = np.einsum("cjqk,cqk->cjq", Gt, v[sl])
            blk = _blk(coef, pp, pt) + _blk(s * m["rho_prime"][sl] * jw, pp, vdgt)
            K[:, op : op + nbp, ot : ot + nbt] += blk

        # temperature row
        K[:, ot : ot + nbt, ot : ot + nbt] += p.k_thermal * (
            _blk(jw, Gt[..., 0], Gt[..., 0]) + _blk(jw, Gt[..., 1], Gt[..., 1])
        )
        if not linear:
            vdgt = np.einsum("cjqk,cqk->cjq", Gt, v[sl])
            K[:, ot : ot + nbt, ot : ot + nbt] += _blk(jw, pt, vdgt)
            for d in range(2):
                K[:, ot : ot + nbt, ov[d] : ov[d] + nbv] += _blk(gt[sl, :, d] * jw, pt, pv)

        dloc = dofs[sl]
        rows_all.append(np.broadcast_to(dloc[:, :, None], (ncH, nloc, nloc)).ravel())
        cols_all.append(np.broadcast_to(dloc[:, None, :], (ncH, nloc, nloc)).ravel())
        data_all.append(K.ravel())

    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    data = np.concatenate(data_all)
    A = sp.coo_matrix((data, (rows, cols)), shape=(space.n_dofs, space.n_dofs)).tocsr()
    del rows, cols, data, rows_all, cols_all, data_all
    A.sum_duplicates()
    A.sort_indices()
    if condense:
        return space.constraints.condense_matrix(A)
    return A


def residual_pairing(space, u, z, model, boost=2, rule=None):
    """-A(U)(Z) for a state Z in the same space (the iteration-error form)."""
    r = assemble_residual(space, u, model, condense=True, boost=boost, rule=rule)
    return -float(np.dot(r, z))
