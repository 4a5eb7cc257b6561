"""Command-line driver: experiment presets, config files, CSV/VTK emission.

Presets reproduce the three experiments (two lasers in a square, the
focus-parameter sweep, and the disc with a Density/Boussinesq comparison).
Configuration is flat key=value text; command-line flags override file keys.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adapt, goals as goalsmod, mesh as meshmod
from .fespace import DegreeTriple, FIELD_P, FIELD_T, FIELD_VX, FIELD_VY
from .model import LaserSource, MaterialParams, Model, ModelKind
from .nlsolve import NewtonConfig, NewtonDivergenceError

# reference values for the focus sweep (columns sigma = 1e-1 .. 1e-4)
EX2_REFERENCE = {
    1e-1: (4.568690e-3, 299.0619, 305.7956, 306.8565),
    1e-2: (4.821760e-3, 302.1829, 303.4749, 307.3140),
    1e-3: (5.692103e-3, 302.3692, 303.4754, 307.3146),
    1e-4: (5.705407e-3, 302.3710, 303.4754, 307.3146),
}
# reference values for the disc comparison
EX3_REFERENCE = {
    "density": (-0.12361494, 0.57190820, 0.34235964, 8.62163631, 353.526189, -844.882355),
    "boussinesq": (-0.16786688, 0.48240847, 0.26089722, -73.2536833, 353.919688, -844.882273),
}

_MODEL_KINDS = {
    "density": ModelKind.DENSITY,
    "boussinesq": ModelKind.BOUSSINESQ,
    "linear": ModelKind.LINEAR_VERIFICATION,
}


@dataclass
class RunConfig:
    preset: str = "custom"
    model: str = "density"
    sigma: float = 1e-2
    e_amplitude: float = 100.0
    gamma: float = 2.0
    tol: float = 0.0
    max_ndofs: int = 200_000
    max_levels: int = 100
    mark_fraction: float = 0.10
    out: str = "out"
    continuity_sign: str = "as-printed"
    gravity_x: float = 0.0
    gravity_y: float = -9.81
    theta_boundary: float = 293.15
    prerefine_levels: int = -1  # -1: pick from sigma
    prerefine_radius: float = -1.0  # -1: 8 sigma
    square_n: int = 3
    beta: float = 0.7
    max_line_search: int = 20
    max_newton: int = 30
    res_abs: float = 1e-12
    res_rel: float = 1e-9
    boost: int = 2
    write_vtk: bool = True
    quiet: bool = False


def parse_config_file(path):
    """Flat key=value lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


_BOOL_KEYS = {"write_vtk", "quiet"}
_INT_KEYS = {"max_ndofs", "max_levels", "prerefine_levels", "square_n",
             "max_line_search", "max_newton", "boost"}
_STR_KEYS = {"preset", "model", "out", "continuity_sign"}


def apply_config_values(config, values):
    valid = {f.name for f in fields(RunConfig)}
    for key, val in values.items():
        if key not in valid:
            raise ValueError(f"unknown configuration key {key!r}")
        if key in _STR_KEYS:
            setattr(config, key, val)
        elif key in _BOOL_KEYS:
            setattr(config, key, str(val).lower() in ("1", "true", "yes", "on"))
        elif key in _INT_KEYS:
            setattr(config, key, int(val))
        else:
            setattr(config, key, float(val))
    return config


def preset_defaults(name):
    """Baseline RunConfig for a named experiment."""
    if name == "example1":
        sigma = math.sqrt(1.0 / 500.0)
        return RunConfig(
            preset=name,
            model="density",
            sigma=sigma,
            # the printed amplitude 1e4 is read as the Gaussian peak height;
            # with the normalized source profile that is 2*pi*sigma^2 * 1e4
            e_amplitude=2.0 * math.pi * sigma**2 * 1e4,
            theta_boundary=293.15,
        )
    if name == "example2":
        return RunConfig(preset=name, model="density", sigma=1e-2,
                         e_amplitude=100.0, theta_boundary=293.15)
    if name == "example3":
        return RunConfig(preset=name, model="density", sigma=1e-3,
                         e_amplitude=200.0, gamma=2.0, theta_boundary=274.15)
    if name == "custom":
        return RunConfig()
    raise ValueError(f"unknown preset {name!r}")


def build_problem(config):
    """Translate a RunConfig into a ProblemSetup (mesh, model, goals, refs)."""
    kind = _MODEL_KINDS.get(config.model)
    if kind is None:
        raise ValueError(f"unknown model {config.model!r}")
    params = MaterialParams(gravity=(config.gravity_x, config.gravity_y))
    sigma = config.sigma

    if config.preset in ("example1", "example2", "custom"):
        domain = meshmod.create_square((0.0, 0.0), 0.3, config.square_n)
        centers = ((0.05, 0.05), (0.25, 0.05))
        amps = (config.e_amplitude, config.e_amplitude)
        h0 = 0.3 / config.square_n
        y_pt, z_pt = (0.15, 0.15), (0.15, 0.1)
        if config.preset == "example2":
            goal_list = [
                goalsmod.MeanVelocityMagnitude(),
                goalsmod.MeanTemperature(),
                goalsmod.PointTemperature(y_pt),
                goalsmod.PointTemperature(z_pt),
            ]
            ref = _match_ex2_reference(sigma)
        else:
            goal_list = [
                goalsmod.MeanVelocityMagnitude(),
                goalsmod.MeanTemperature(),
                goalsmod.PointTemperature(y_pt),
            ]
            ref = None
    elif config.preset == "example3":
        domain = meshmod.create_disc((0.0, 0.0), 0.2)
        centers = ((-0.05, -0.1), (0.05, -0.1))
        amps = (config.gamma * config.e_amplitude, config.e_amplitude / config.gamma)
        h0 = 0.2 * math.sqrt(2.0)
        la, lb = centers
        goal_list = [
            goalsmod.PointVelocityComponent(la, 0),
            goalsmod.PointVelocityComponent(la, 1),
            goalsmod.PointSpeedSquared(la),
            goalsmod.PressureDifference(la, lb),
            goalsmod.PointTemperature((0.0, 0.0)),
            goalsmod.BoundaryHeatFlux(),
        ]
        ref = EX3_REFERENCE.get(config.model)
    else:
        raise ValueError(f"unknown preset {config.preset!r}")

    levels = config.prerefine_levels
    if levels < 0:
        # refine until the local mesh width resolves the source width
        levels = max(0, math.ceil(math.log2(h0 / sigma)))
    radius = config.prerefine_radius if config.prerefine_radius > 0 else 8.0 * sigma
    domain = meshmod.prerefine_near_points(domain, centers, levels, radius)

    model = Model(
        kind=kind,
        params=params,
        source=LaserSource(centers=centers, amplitudes=amps, sigma=sigma),
        continuity_sign=config.continuity_sign,
    )
    return adapt.ProblemSetup(
        name=config.preset,
        mesh=domain,
        degrees=DegreeTriple(2, 1, 1),
        model=model,
        goals=goal_list,
        theta_boundary=config.theta_boundary,
        reference_values=None if ref is None else np.asarray(ref, dtype=float),
        reference_source="table" if ref is not None else "none",
        boost=config.boost,
    )


def _match_ex2_reference(sigma):
    for key, ref in EX2_REFERENCE.items():
        if abs(sigma - key) <= 1e-12 * key:
            return ref
    return None


# -- output writers -----------------------------------------------------------


def _fmt(x):
    if x is None:
        return "nan"
    return format(float(x), ".17g")


def csv_header(n_goals):
    cols = ["level", "dofs"]
    cols += [f"J_{i + 1}" for i in range(n_goals)]
    cols += [f"abs_err_J_{i + 1}" for i in range(n_goals)]
    cols += [f"rel_err_J_{i + 1}" for i in range(n_goals)]
    cols += ["eta_p", "eta_a", "eta_k", "eta_h",
             "I_eff", "I_eff_p", "I_eff_a", "newton_steps", "line_search_steps",
             "err_Jc"]
    return cols


def csv_row(record, n_goals):
    est = record.estimator
    abs_err = record.abs_errors if record.abs_errors is not None else [None] * n_goals
    rel_err = record.rel_errors if record.rel_errors is not None else [None] * n_goals
    row = [str(record.level), str(record.n_dofs)]
    row += [_fmt(v) for v in record.goal_values]
    row += [_fmt(v) for v in abs_err]
    row += [_fmt(v) for v in rel_err]
    row += [_fmt(est.eta_p), _fmt(est.eta_a), _fmt(est.eta_k), _fmt(est.eta_h)]
    row += [_fmt(record.i_eff), _fmt(record.i_eff_p), _fmt(record.i_eff_a)]
    row += [str(record.newton.newton_steps), str(record.newton.total_line_search_steps)]
    row += [_fmt(record.true_combined_error)]
    return row


def write_convergence_csv(path, records, n_goals):
    lines = [",".join(csv_header(n_goals))]
    for rec in records:
        lines.append(",".join(csv_row(rec, n_goals)))
    Path(path).write_text("\n".join(lines) + "\n")


def pressure_mean(space, u):
    rule = space.assembly_rule(0)
    geom = space.geometry(rule)
    F = space.eval_fields(u, rule)
    return float(np.sum(F["p"] * geom.jxw) / np.sum(geom.jxw))


def write_vtk(path, mesh, space, u, title="goalfem fields"):
    """Legacy ASCII VTK unstructured grid with vertex point data."""
    active = [int(c) for c in mesh.active_cell_ids()]
    used = sorted({v for cid in active for v in mesh.cells[cid].vertex_ids})
    index = {v: i for i, v in enumerate(used)}
    p_shift = pressure_mean(space, u)
    vals = {}
    for f, name in ((FIELD_VX, "vx"), (FIELD_VY, "vy"), (FIELD_P, "p"), (FIELD_T, "theta")):
        num = space.scalar[f]
        off = int(space.offsets[f])
        vals[name] = [u[off + num.vertex_dof[v]] for v in used]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(used)} double")
    for v in used:
        vert = mesh.vertices[v]
        lines.append(f"{vert.x:.17g} {vert.y:.17g} 0")
    lines.append(f"CELLS {len(active)} {5 * len(active)}")
    for cid in active:
        ids = " ".join(str(index[v]) for v in mesh.cells[cid].vertex_ids)
        lines.append(f"4 {ids}")
    lines.append(f"CELL_TYPES {len(active)}")
    lines.extend(["9"] * len(active))
    lines.append(f"POINT_DATA {len(used)}")
    lines.append("VECTORS velocity double")
    for a, b in zip(vals["vx"], vals["vy"]):
        lines.append(f"{a:.17g} {b:.17g} 0")
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    for a in vals["p"]:
        lines.append(f"{a - p_shift:.17g}")
    lines.append("SCALARS temperature double 1")
    lines.append("LOOKUP_TABLE default")
    for a in vals["theta"]:
        lines.append(f"{a:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_report(path, records, problem, reference, ref_source, diverged=False):
    lines = [f"preset: {problem.name}", f"model: {problem.model.kind.value}"]
    lines.append(f"levels: {len(records)}")
    lines.append(f"reference source: {ref_source}")
    if diverged:
        lines.append("status: DIVERGED (partial results)")
    else:
        lines.append("status: completed")
    final = records[-1]
    lines.append(f"final dofs: {final.n_dofs}")
    for i, val in enumerate(final.goal_values):
        line = f"J_{i + 1}(U_h) = {val:.12g}"
        if reference is not None:
            line += f"   reference = {reference[i]:.12g}"
            if final.abs_errors is not None:
                line += f"   abs err = {final.abs_errors[i]:.3e}"
        lines.append(line)
    est = final.estimator
    lines.append(
        f"final estimator: eta_h = {est.eta_h:.6e}, eta_k = {est.eta_k:.3e}"
    )
    if final.i_eff is not None:
        lines.append(f"final I_eff = {final.i_eff:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- run command ---------------------------------------------------------------


def run(config):
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    adapt_cfg = adapt.AdaptConfig(
        tol=config.tol,
        max_ndofs=config.max_ndofs,
        mark_fraction=config.mark_fraction,
        max_levels=config.max_levels,
    )
    newton_cfg = NewtonConfig(
        beta=config.beta,
        max_line_search=config.max_line_search,
        max_newton=config.max_newton,
        res_abs=config.res_abs,
        res_rel=config.res_rel,
    )
    records = []

    def on_level(record, mesh, space, u):
        records.append(record)
        if not config.quiet:
            est = record.estimator
            print(
                f"level {record.level}: dofs={record.n_dofs} cells={record.n_cells} "
                f"eta_h={est.eta_h:+.4e} eta_k={est.eta_k:+.2e} "
                f"newton={record.newton.newton_steps} ls={record.newton.total_line_search_steps}"
            )
        if config.write_vtk:
            write_vtk(out_dir / f"fields_{record.level}.vtk", mesh, space, u,
                      title=f"{problem.name} level {record.level}")

    diverged = False
    try:
        adapt.adaptive_loop(problem, adapt_cfg, newton_cfg, on_level=on_level)
    except NewtonDivergenceError as err:
        diverged = True
        print(f"error: Newton diverged: {err}", file=sys.stderr)

    if not records:
        print("error: no level completed", file=sys.stderr)
        return 1

    if problem.reference_values is not None:
        reference, ref_source = problem.reference_values, "table"
    else:
        reference = records[-1].goal_values_enriched
        ref_source = "self:enriched-final"
        adapt.attach_reference(records, reference, ref_source)

    n_goals = len(problem.goals)
    write_convergence_csv(out_dir / "convergence.csv", records, n_goals)
    write_report(out_dir / "report.txt", records, problem, reference, ref_source,
                 diverged=diverged)
    if not config.quiet:
        print(f"wrote {out_dir / 'convergence.csv'}")
    return 1 if diverged else 0


# -- diff command --------------------------------------------------------------


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def diff_reports(path_a, path_b, rtols, default_rtol=None):
    """Column-wise relative comparison of two convergence CSVs.

    Returns (ok, messages). Any NaN fails; schema mismatch raises ValueError.
    """
    header_a, rows_a = read_csv(path_a)
    header_b, rows_b = read_csv(path_b)
    if header_a != header_b:
        raise ValueError("schema mismatch: headers differ")
    if len(rows_a) != len(rows_b):
        raise ValueError(
            f"schema mismatch: row counts differ ({len(rows_a)} vs {len(rows_b)})"
        )
    messages = []
    ok = True
    for r, (ra, rb) in enumerate(zip(rows_a, rows_b)):
        for c, col in enumerate(header_a):
            try:
                va, vb = float(ra[c]), float(rb[c])
            except ValueError:
                if ra[c] != rb[c]:
                    ok = False
                    messages.append(f"row {r} column {col}: {ra[c]!r} != {rb[c]!r}")
                continue
            if math.isnan(va) or math.isnan(vb):
                ok = False
                messages.append(f"row {r} column {col}: NaN value")
                continue
            rtol = rtols.get(col, default_rtol)
            if rtol is None:
                continue
            denom = max(abs(va), abs(vb), 1e-300)
            if abs(va - vb) > rtol * denom:
                ok = False
                messages.append(
                    f"row {r} column {col}: {va:.6g} vs {vb:.6g} "
                    f"(rel {abs(va - vb) / denom:.2e} > {rtol:.2e})"
                )
    return ok, messages


def diff_command(args):
    rtols = {}
    default_rtol = args.default_rtol
    if args.rtol_file:
        for key, val in parse_config_file(args.rtol_file).items():
            if key == "default":
                default_rtol = float(val)
            else:
                rtols[key] = float(val)
    try:
        ok, messages = diff_reports(args.a, args.b, rtols, default_rtol)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    for msg in messages:
        print(msg)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# -- argument parsing ----------------------------------------------------------


def make_parser():
    parser = argparse.ArgumentParser(prog="goalfem")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run an adaptive experiment")
    runp.add_argument("--preset", default=None,
                      choices=["example1", "example2", "example3", "custom"])
    runp.add_argument("--config", default=None, help="key=value configuration file")
    runp.add_argument("--sigma", type=float, default=None)
    runp.add_argument("--model", default=None, choices=sorted(_MODEL_KINDS))
    runp.add_argument("--e", dest="e_amplitude", type=float, default=None)
    runp.add_argument("--gamma", type=float, default=None)
    runp.add_argument("--tol", type=float, default=None)
    runp.add_argument("--max-ndofs", dest="max_ndofs", type=int, default=None)
    runp.add_argument("--max-levels", dest="max_levels", type=int, default=None)
    runp.add_argument("--mark-fraction", dest="mark_fraction", type=float, default=None)
    runp.add_argument("--gravity-y", dest="gravity_y", type=float, default=None)
    runp.add_argument("--continuity-sign", dest="continuity_sign", default=None,
                      choices=["as-printed", "conservative"])
    runp.add_argument("--prerefine-levels", dest="prerefine_levels", type=int, default=None)
    runp.add_argument("--out", default=None)
    runp.add_argument("--no-vtk", action="store_true")
    runp.add_argument("--quiet", action="store_true")

    diffp = sub.add_parser("diff", help="compare two convergence CSVs")
    diffp.add_argument("a")
    diffp.add_argument("b")
    diffp.add_argument("--rtol-file", default=None)
    diffp.add_argument("--default-rtol", type=float, default=None)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command == "diff":
        return diff_command(args)

    file_values = {}
    if args.config:
        try:
            file_values = parse_config_file(args.config)
        except (OSError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return 2
    preset = args.preset or file_values.get("preset", "custom")
    try:
        config = preset_defaults(preset)
        apply_config_values(config, {k: v for k, v in file_values.items() if k != "preset"})
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    for key in ("sigma", "model", "e_amplitude", "gamma", "tol", "max_ndofs",
                "max_levels", "mark_fraction", "gravity_y", "continuity_sign",
                "prerefine_levels", "out"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(config, key, val)
    if args.no_vtk:
        config.write_vtk = False
    if args.quiet:
        config.quiet = True
    try:
        return run(config)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
