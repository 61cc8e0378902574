"""Experiment drivers, configuration parsing, and output writers.

Configurations are flat INI files (configparser); every experiment fills in
sensible defaults so a config can be as short as two lines. Outputs are CSV
tables (comma separator, decimal point), legacy-ASCII VTK snapshots, and a
plain-text key=value run report sufficient to re-run bit-identically.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import (ErrorTable, ManufacturedSolution, divergence_l2,
                       field_error_lp, flow_rate, infsup_probe,
                       manufactured_forcing, natural_distance,
                       natural_transform, velocity_error_w1r)
from .constitutive import (ActivatedEulerNS, BinghamPapanastasiou, Carreau,
                           Newtonian, check_coercive, check_monotone,
                           eval_residual, eval_tangents, frob_inner,
                           frob_norm)
from .fespace import DiscreteField, element_pair_spaces, interpolate
from .forms import (DirichletBC, FormParams, ThreeFieldProblem,
                    mesh_quadrature, select_b_variant, strain_from_gradient)
from .mesh import barycentric_refine, dump_mesh, unit_square_mesh
from .solver import (ContinuationSchedule, NewtonError, NewtonOptions,
                     continuation_solve, newton_solve)
from .timestepper import (TimeGrid, interpolate_stress, march,
                          time_average_forcing)

EXPERIMENTS = ("carreau-steady", "carreau-unsteady", "penalty-study",
               "cavity-activated", "couette-cessation", "infsup-probe",
               "graph-check")

_GAUSS3 = (np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)]),
           0.5 * np.array([5 / 9, 8 / 9, 5 / 9]))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str
    levels: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    pattern: str = "right"
    pair: str = "scott-vogelius"
    model: str = "carreau"
    nu: float = 0.5
    eps: float = 1e-5
    r: float = 1.5
    bn: float = 1.0
    m: float = 200.0
    delta_s: float = 2.5
    a: float = 1.01
    b: float = None
    inv_l: float = 0.0
    tau: float = 1e-3
    T: float = 0.1
    atol: float = 1e-10
    rtol: float = 1e-9
    max_iter: int = 30
    m_stages: list = field(default_factory=lambda: [10.0, 50.0, 200.0])
    couette_bns: list = field(default_factory=lambda: [0.0, 2.0, 5.0, 20.0])
    couette_n: int = 16
    couette_tau: float = 1e-4
    couette_T: float = 0.3
    cessation_threshold: float = 1e-4
    section: float = 0.25
    out_dir: str = "out"
    thin: int = 0
    write_vtk: bool = False
    dump_mesh: bool = False
    threads: int = 1

    def resolved_b(self):
        return 2.0 / self.r - 0.99 if self.b is None else self.b


def parse_config(path):
    """Read an INI config file into a RunConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    try:
        name = cp.get("experiment", "name")
    except (configparser.NoSectionError, configparser.NoOptionError) as exc:
        raise ConfigError(f"missing [experiment] name: {exc}") from exc
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; "
                          f"expected one of {EXPERIMENTS}")
    cfg = RunConfig(experiment=name)

    def get(section, option, cast, default):
        try:
            raw = cp.get(section, option)
        except (configparser.NoSectionError, configparser.NoOptionError):
            return default
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(
                f"bad value for [{section}] {option}: {raw!r}") from exc

    def intlist(raw):
        return [int(v) for v in raw.split()]

    def floatlist(raw):
        return [float(v) for v in raw.split()]

    def boolean(raw):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)

    cfg.levels = get("mesh", "levels", intlist, cfg.levels)
    cfg.pattern = get("mesh", "pattern", str, cfg.pattern)
    cfg.pair = get("elements", "pair", str, cfg.pair)
    cfg.model = get("model", "type", str, cfg.model)
    cfg.nu = get("model", "nu", float, cfg.nu)
    cfg.eps = get("model", "eps", float, cfg.eps)
    cfg.r = get("model", "r", float, cfg.r)
    cfg.bn = get("model", "bn", float, cfg.bn)
    cfg.m = get("model", "m", float, cfg.m)
    cfg.delta_s = get("model", "delta_s", float, cfg.delta_s)
    cfg.a = get("manufactured", "a", float, cfg.a)
    braw = get("manufactured", "b", str, None)
    if braw is not None and braw != "auto":
        cfg.b = float(braw)
    cfg.inv_l = get("penalty", "inv_l", float, cfg.inv_l)
    cfg.tau = get("time", "tau", float, cfg.tau)
    cfg.T = get("time", "T", float, cfg.T)
    cfg.atol = get("newton", "atol", float, cfg.atol)
    cfg.rtol = get("newton", "rtol", float, cfg.rtol)
    cfg.max_iter = get("newton", "max_iter", int, cfg.max_iter)
    cfg.m_stages = get("continuation", "m_stages", floatlist, cfg.m_stages)
    cfg.couette_bns = get("couette", "bn_list", floatlist, cfg.couette_bns)
    cfg.couette_n = get("couette", "n", int, cfg.couette_n)
    cfg.couette_tau = get("couette", "tau", float, cfg.couette_tau)
    cfg.couette_T = get("couette", "T", float, cfg.couette_T)
    cfg.cessation_threshold = get("couette", "threshold", float,
                                  cfg.cessation_threshold)
    cfg.section = get("couette", "section", float, cfg.section)
    cfg.out_dir = get("output", "dir", str, cfg.out_dir)
    cfg.thin = get("output", "thin", int, cfg.thin)
    cfg.write_vtk = get("output", "vtk", boolean, cfg.write_vtk)

    if cfg.pair not in ("scott-vogelius", "taylor-hood", "p1p1"):
        raise ConfigError(f"unknown element pair {cfg.pair!r}")
    if cfg.pattern not in ("right", "left"):
        raise ConfigError(f"unknown mesh pattern {cfg.pattern!r}")
    return cfg


# -- writers -----------------------------------------------------------------

def write_csv_table(table, path):
    """CSV with h (and tau), error and EOC columns, 'Expected' footer."""
    rates = table.rates()
    cols = ["h"] + (["tau"] if table.taus else [])
    for name in table.norms:
        cols += [f"err_{name}", f"eoc_{name}"]
    lines = [",".join(cols)]
    for i, h in enumerate(table.hs):
        row = [repr(float(h))]
        if table.taus:
            row.append(repr(float(table.taus[i])))
        for name in table.norms:
            row.append(repr(float(table.errors[name][i])))
            rate = rates[name][i]
            row.append("" if rate is None else repr(float(rate)))
        lines.append(",".join(row))
    if table.expected:
        row = ["Expected"] + ([""] if table.taus else [])
        for name in table.norms:
            row.append("")
            row.append(str(table.expected.get(name, "")))
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_csv_table(path):
    """Parse a table written by write_csv_table back into floats."""
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    header = lines[0].split(",")
    rows = []
    expected = None
    for ln in lines[1:]:
        cells = ln.split(",")
        if cells[0] == "Expected":
            expected = cells
            continue
        rows.append([float(c) if c else None for c in cells])
    return header, rows, expected


def write_vtk(path, mesh, point_vectors=None, point_scalars=None,
              cell_scalars=None, title="rheoflow output"):
    """Legacy-ASCII VTK unstructured grid with triangle cells."""
    point_vectors = point_vectors or {}
    point_scalars = point_scalars or {}
    cell_scalars = cell_scalars or {}
    nv, nc = mesh.num_vertices, mesh.num_cells
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        f.write(f"CELLS {nc} {4 * nc}\n")
        for a, b, c in mesh.cells:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {nc}\n")
        f.write("5\n" * nc)
        if point_vectors or point_scalars:
            f.write(f"POINT_DATA {nv}\n")
            for name, data in point_vectors.items():
                f.write(f"VECTORS {name} double\n")
                for vx, vy in data:
                    f.write(f"{float(vx)!r} {float(vy)!r} 0.0\n")
            for name, data in point_scalars.items():
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in data:
                    f.write(f"{float(v)!r}\n")
        if cell_scalars:
            f.write(f"CELL_DATA {nc}\n")
            for name, data in cell_scalars.items():
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in data:
                    f.write(f"{float(v)!r}\n")


def write_report(path, cfg, extras):
    lines = [f"version = {__version__}",
             f"threads = {cfg.threads}",
             f"wall_clock_s = {extras.pop('wall_clock_s', 0.0):.3f}"]
    for key, val in sorted(vars(cfg).items()):
        lines.append(f"config.{key} = {val}")
    for key, val in extras.items():
        lines.append(f"{key} = {val}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def state_vtk_data(mesh, spaces, x):
    """VTK arrays for a three-field state: u vertex vectors, p, S, |S|, |D|."""
    S, V, P = spaces
    nv = mesh.num_vertices
    uvals = x[S.dim:S.dim + V.dim].reshape(-1, 2)[:nv]
    point_vectors = {"velocity": uvals}
    point_scalars = {}
    cell_scalars = {}
    pv = x[S.dim + V.dim:]
    if P.family == "CG":
        point_scalars["pressure"] = pv[:nv]
    else:
        cell_scalars["pressure"] = pv.reshape(mesh.num_cells, -1).mean(axis=1)
    scomp = x[:S.dim].reshape(mesh.num_cells, -1, 3).mean(axis=1)
    cell_scalars["stress_11"] = scomp[:, 0]
    cell_scalars["stress_22"] = scomp[:, 1]
    cell_scalars["stress_12"] = scomp[:, 2]
    cell_scalars["stress_mag"] = frob_norm(scomp)
    from .forms import CellQuadrature
    from .quadrature import triangle_rule
    grp = CellQuadrature(mesh, np.arange(mesh.num_cells), triangle_rule(1))
    D = strain_from_gradient(grp.gradients(V, x[S.dim:S.dim + V.dim]))
    cell_scalars["strain_mag"] = frob_norm(D)[:, 0]
    return point_vectors, point_scalars, cell_scalars


# -- shared pieces -------------------------------------------------------------

def build_model(cfg):
    if cfg.model == "newtonian":
        return Newtonian(nu=cfg.nu)
    if cfg.model == "carreau":
        return Carreau(nu=cfg.nu, eps=cfg.eps, r=cfg.r)
    if cfg.model == "bingham":
        return BinghamPapanastasiou(bn=cfg.bn, m=cfg.m)
    if cfg.model == "activated":
        return ActivatedEulerNS(nu=cfg.nu, delta_s=cfg.delta_s, m=cfg.m)
    raise ConfigError(f"unknown model {cfg.model!r}")


def build_mesh(n, pair, pattern="right"):
    mesh = unit_square_mesh(n, pattern)
    if pair == "scott-vogelius":
        mesh = barycentric_refine(mesh)
    return mesh


def newton_options(cfg, nullspace):
    return NewtonOptions(atol=cfg.atol, rtol=cfg.rtol,
                         max_iter=cfg.max_iter, nullspace=nullspace)


def steady_manufactured_solve(cfg, n, sol, model, convection=False):
    """Solve one steady manufactured level; returns (x, problem, groups)."""
    mesh = build_mesh(n, cfg.pair, cfg.pattern)
    S, V, P = element_pair_spaces(mesh, cfg.pair)
    forcing = manufactured_forcing(
        sol, "steady-conv" if convection else "steady-noconv",
        inv_l=cfg.inv_l)
    bcs = [DirichletBC((1, 2, 3, 4), lambda x: sol.velocity(1.0, x))]
    params = FormParams(forcing=lambda x: forcing(1.0, x), inv_l=cfg.inv_l,
                        r=cfg.r, convection=convection,
                        b_variant=select_b_variant(cfg.pair))
    problem = ThreeFieldProblem(S, V, P, model, params, bcs,
                                quad_degree=7, singular_point=(0.0, 0.0))
    stokes = ThreeFieldProblem(S, V, P, Newtonian(nu=cfg.nu), params, bcs,
                               quad_degree=7, singular_point=(0.0, 0.0))
    opts = newton_options(cfg, nullspace=True)
    x0, _ = newton_solve(stokes, np.zeros(stokes.dim), opts)
    try:
        x, hist = newton_solve(problem, x0, opts)
    except NewtonError:
        if not isinstance(model, Carreau):
            raise
        # fall back to a short continuation in r for strongly shear-thinning
        # runs where plain Newton from the Stokes guess stalls
        stages = [("r", rr) for rr in (1.6, cfg.r) if rr >= cfg.r]

        def builder(name, value):
            return ThreeFieldProblem(
                S, V, P, Carreau(nu=cfg.nu, eps=cfg.eps, r=value), params,
                bcs, quad_degree=7, singular_point=(0.0, 0.0))

        x, hists = continuation_solve(ContinuationSchedule(stages), builder,
                                      x0, opts)
        hist = hists[-1][2]
    groups = mesh_quadrature(mesh, 8, singular_point=(0.0, 0.0))
    return x, problem, groups, hist


def steady_error_row(cfg, sol, x, problem, groups):
    S, V, P = problem.S_space, problem.u_space, problem.p_space
    u_h = DiscreteField(V, x[S.dim:S.dim + V.dim])
    p_h = DiscreteField(P, x[S.dim + V.dim:])
    s_h = DiscreteField(S, x[:S.dim])
    rp = cfg.r / (cfg.r - 1.0)
    return {
        "F": natural_distance(u_h, lambda p: sol.strain(1.0, p), cfg.r,
                              cfg.eps, groups=groups),
        "u_W1r": velocity_error_w1r(
            u_h, lambda p: sol.velocity(1.0, p),
            lambda p: sol.velocity_gradient(1.0, p), cfg.r, groups=groups),
        "p_Lrp": field_error_lp(p_h, lambda p: sol.pressure(1.0, p), rp,
                                groups=groups, mean_adjust=True),
        "S_Lrp": field_error_lp(s_h, lambda p: sol.stress(1.0, p), rp,
                                groups=groups),
    }, divergence_l2(u_h, groups=groups)


# -- experiments ----------------------------------------------------------------

def run_carreau_steady(cfg, out):
    sol = ManufacturedSolution(a=cfg.a, b=cfg.resolved_b(), r=cfg.r,
                               nu=cfg.nu, eps=cfg.eps)
    model = build_model(cfg)
    table = ErrorTable(norms=["F", "u_W1r", "p_Lrp", "S_Lrp"], hs=[],
                       expected={"F": 1.0,
                                 "p_Lrp": round(min(2 / (cfg.r / (cfg.r - 1)),
                                                    (cfg.r / (cfg.r - 1)) / 2),
                                                3)})
    extras = {}
    for n in cfg.levels:
        x, problem, groups, hist = steady_manufactured_solve(cfg, n, sol,
                                                             model)
        errs, div = steady_error_row(cfg, sol, x, problem, groups)
        table.add_row(1.0 / n, errs)
        extras[f"level_{n}.newton_iterations"] = hist.iterations
        extras[f"level_{n}.div_u_l2"] = f"{div:.3e}"
        if cfg.write_vtk:
            pv, ps, cs = state_vtk_data(problem.mesh,
                                        (problem.S_space, problem.u_space,
                                         problem.p_space), x)
            write_vtk(os.path.join(out, f"carreau_steady_n{n}.vtk"),
                      problem.mesh, pv, ps, cs)
    write_csv_table(table, os.path.join(out, "table_carreau_steady.csv"))
    return table, extras


def run_carreau_unsteady(cfg, out):
    sol = ManufacturedSolution(a=cfg.a, b=cfg.resolved_b(), r=cfg.r,
                               nu=cfg.nu, eps=cfg.eps, unsteady=True)
    model = build_model(cfg)
    forcing = manufactured_forcing(sol, "unsteady-full", inv_l=cfg.inv_l)
    table = ErrorTable(norms=["F_L2Q", "u_LinfL2"], hs=[], taus=[],
                       expected={"F_L2Q": 1.0, "u_LinfL2": 1.0})
    extras = {}
    gauss_nodes, gauss_w = _GAUSS3
    for idx, n in enumerate(cfg.levels):
        tau = cfg.tau / 2 ** idx
        mesh = build_mesh(n, cfg.pair, cfg.pattern)
        S, V, P = element_pair_spaces(mesh, cfg.pair)
        grid = TimeGrid(tau, cfg.T)

        def bc_fn(t):
            return [DirichletBC((1, 2, 3, 4),
                                lambda x, t=t: sol.velocity(t, x))]

        params = FormParams(tau=tau, convection=True,
                            b_variant=select_b_variant(cfg.pair), r=cfg.r,
                            inv_l=cfg.inv_l)
        problem = ThreeFieldProblem(S, V, P, model, params, bc_fn(0.0),
                                    quad_degree=7, singular_point=(0.0, 0.0))
        groups = mesh_quadrature(mesh, 8, singular_point=(0.0, 0.0))
        acc = {"F2": 0.0, "umax": 0.0}

        def monitor(problem, j, x, x_prev, acc=acc, grid=grid, tau=tau,
                    groups=groups):
            t1, t0 = grid.node(j), grid.node(j - 1)
            uv = x[problem.nS:problem.nS + problem.nU]
            d_h = [strain_from_gradient(g.gradients(problem.u_space, uv))
                   for g in groups]
            total = 0.0
            for gn, gw in zip(gauss_nodes, gauss_w):
                tg = 0.5 * (t0 + t1) + 0.5 * tau * gn
                for g, dh in zip(groups, d_h):
                    diff = natural_transform(sol.strain(tg, g.points),
                                             cfg.r, cfg.eps) \
                        - natural_transform(dh, cfg.r, cfg.eps)
                    total += gw * float(np.sum(g.wdet
                                               * frob_inner(diff, diff)))
            acc["F2"] += tau * total
            u_field = DiscreteField(problem.u_space, uv)
            err = field_error_lp(u_field, lambda p: sol.velocity(t1, p), 2.0,
                                 groups=groups)
            acc["umax"] = max(acc["umax"], err)
            return {}

        traj = march(problem, np.zeros(problem.dim), grid,
                     newton_options(cfg, nullspace=True),
                     forcing_fn=lambda g, j: time_average_forcing(forcing, g,
                                                                  j),
                     bc_fn=bc_fn, monitor=monitor, thin=10 ** 9)
        table.add_row(1.0 / n, {"F_L2Q": np.sqrt(acc["F2"]),
                                "u_LinfL2": acc["umax"]}, tau=tau)
        its = [d.newton_iterations for d in traj.diagnostics]
        extras[f"level_{n}.avg_newton_iterations"] = f"{np.mean(its):.2f}"
    write_csv_table(table, os.path.join(out, "table_carreau_unsteady.csv"))
    return table, extras


def run_penalty_study(cfg, out):
    from dataclasses import replace
    tables = {}
    extras = {}
    for label, inv_l in (("with_penalty", cfg.inv_l or 1.0),
                         ("without_penalty", 0.0)):
        sub = replace(cfg, inv_l=inv_l, pair="taylor-hood")
        sol = ManufacturedSolution(a=sub.a, b=sub.resolved_b(), r=sub.r,
                                   nu=sub.nu, eps=sub.eps)
        model = build_model(sub)
        rp = sub.r / (sub.r - 1.0)
        table = ErrorTable(norms=["F", "p_Lrp"], hs=[],
                           expected={"F": 1.0, "p_Lrp": round(2 / rp, 3)})
        for n in sub.levels:
            x, problem, groups, hist = steady_manufactured_solve(sub, n, sol,
                                                                 model)
            errs, _ = steady_error_row(sub, sol, x, problem, groups)
            table.add_row(1.0 / n, {"F": errs["F"], "p_Lrp": errs["p_Lrp"]})
            extras[f"{label}.level_{n}.newton_iterations"] = hist.iterations
        write_csv_table(table, os.path.join(out, f"table_{label}.csv"))
        tables[label] = table
    return tables, extras


def run_cavity_activated(cfg, out):
    n = cfg.levels[0] if cfg.levels else 16
    mesh = build_mesh(n, cfg.pair, cfg.pattern)
    S, V, P = element_pair_spaces(mesh, cfg.pair)

    def lid(x):
        return np.stack([16 * x[:, 0] ** 2 * (1 - x[:, 0]) ** 2
                         * x[:, 1] ** 2, np.zeros(len(x))], axis=-1)

    bcs = [DirichletBC((1, 2, 4), lambda x: np.zeros_like(x)),
           DirichletBC((3,), lid)]
    params = FormParams(convection=True, b_variant=select_b_variant(cfg.pair),
                        r=2.0)
    opts = newton_options(cfg, nullspace=True)

    stokes = ThreeFieldProblem(S, V, P, Newtonian(nu=cfg.nu), params, bcs)
    x0, _ = newton_solve(stokes, np.zeros(stokes.dim), opts)

    def builder(name, value):
        model = ActivatedEulerNS(nu=cfg.nu, delta_s=cfg.delta_s, m=value)
        return ThreeFieldProblem(S, V, P, model, params, bcs)

    schedule = ContinuationSchedule([("m", m) for m in cfg.m_stages])
    x, hists = continuation_solve(schedule, builder, x0, opts)

    extras = {}
    for name, value, hist in hists:
        extras[f"stage_{name}_{value:g}.newton_iterations"] = hist.iterations

    # |S| and |D| profile along the section x = 0.65
    problem = builder("m", cfg.m_stages[-1])
    prof = section_profile(problem, x, 0.65)
    lines = ["y,strain_mag,stress_mag"]
    for y, dmag, smag in prof:
        lines.append(f"{y!r},{dmag!r},{smag!r}")
    with open(os.path.join(out, "cavity_profile_x0.65.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")

    d, s = disk_samples(problem, x)
    p10 = np.percentile(d, 10)
    ratio = float(s[d <= p10].max() / s.max())
    extras["disk_low_strain_stress_ratio"] = f"{ratio:.4f}"
    if cfg.write_vtk:
        pv, ps, cs = state_vtk_data(mesh, (S, V, P), x)
        write_vtk(os.path.join(out, "cavity_activated.vtk"), mesh, pv, ps, cs)
    return (x, problem), extras


def disk_samples(problem, x, degree=7):
    """|D| and |S| at quadrature points of cells fully inside the disk."""
    mesh = problem.mesh
    model = problem.model
    verts = mesh.vertices[mesh.cells]
    r2 = getattr(model, "radius_sq", (3 / 8) ** 4)
    cx, cy = getattr(model, "center", (0.5, 0.5))
    inside = np.all((verts[:, :, 0] - cx) ** 2 + (verts[:, :, 1] - cy) ** 2
                    <= r2, axis=1)
    if not inside.any():
        # coarse meshes: no cell fits in the disk; sample by barycenter
        bary = mesh.barycenters()
        inside = (bary[:, 0] - cx) ** 2 + (bary[:, 1] - cy) ** 2 <= r2
    from .forms import CellQuadrature
    from .quadrature import triangle_rule
    grp = CellQuadrature(mesh, np.flatnonzero(inside), triangle_rule(degree))
    uv = x[problem.nS:problem.nS + problem.nU]
    d = frob_norm(strain_from_gradient(grp.gradients(problem.u_space, uv)))
    s = frob_norm(grp.values(problem.S_space, x[:problem.nS]))
    return d.ravel(), s.ravel()


def section_profile(problem, x, x1, ny=201):
    """(y, |D|, |S|) along the vertical line x = x1 by point location."""
    mesh = problem.mesh
    c = x1 + 1e-9
    ys = np.linspace(1e-6, 1 - 1e-6, ny)
    pts = np.column_stack([np.full(ny, c), ys])
    v0 = mesh.vertices[mesh.cells[:, 0]]
    out = []
    uv = x[problem.nS:problem.nS + problem.nU]
    Sv = x[:problem.nS]
    from .fespace import evaluate
    u_field = DiscreteField(problem.u_space, uv)
    s_field = DiscreteField(problem.S_space, Sv)
    for pt in pts:
        ref_all = np.einsum("cij,cj->ci", mesh.inv_jacobians, pt - v0)
        ok = (ref_all[:, 0] >= -1e-12) & (ref_all[:, 1] >= -1e-12) \
            & (ref_all.sum(axis=1) <= 1 + 1e-12)
        cell = int(np.argmax(ok))
        ref = np.clip(ref_all[cell], 0.0, 1.0)
        _, grad = evaluate(u_field, cell, ref)
        dmag = frob_norm(strain_from_gradient(grad[None])[0])
        sval, _ = evaluate(s_field, cell, ref)
        out.append((float(pt[1]), float(dmag), float(frob_norm(sval))))
    return out


def run_couette_cessation(cfg, out):
    n, tau = cfg.couette_n, cfg.couette_tau
    mesh = build_mesh(n, "taylor-hood", cfg.pattern)
    S, V, P = element_pair_spaces(mesh, "taylor-hood")
    bcs = [DirichletBC((1, 3), lambda x: np.zeros_like(x)),
           DirichletBC((2, 4), lambda x: np.zeros(len(x)), component=1)]
    extras = {}
    results = {}
    u0 = interpolate(V, lambda x: np.stack([1.0 - x[:, 1],
                                            np.zeros(len(x))], axis=-1))
    q0 = flow_rate(u0, cfg.section)
    extras["Q0"] = repr(float(q0))
    threshold = cfg.cessation_threshold * q0

    positive = sorted([bn for bn in cfg.couette_bns if bn > 0])
    order = positive + [bn for bn in cfg.couette_bns if bn == 0]
    horizon = cfg.couette_T
    cess_times = {}
    for bn in order:
        model = BinghamPapanastasiou(bn=bn, m=cfg.m)
        params = FormParams(tau=tau, convection=True, b_variant="skew", r=2.0)
        problem = ThreeFieldProblem(S, V, P, model, params, bcs)
        x0 = np.zeros(problem.dim)
        x0[:problem.nS] = interpolate_stress(S, u0, model).coeffs
        x0[problem.nS:problem.nS + problem.nU] = u0.coeffs
        if bn == 0 and cess_times:
            horizon = max(cess_times.values())
            horizon = np.ceil(horizon / tau) * tau
        grid = TimeGrid(tau, horizon)

        def monitor(problem, j, x, x_prev):
            u = DiscreteField(V, x[problem.nS:problem.nS + problem.nU])
            return {"flow_rate": flow_rate(u, cfg.section)}

        opts = NewtonOptions(atol=max(cfg.atol, 1e-9), rtol=cfg.rtol,
                             max_iter=max(cfg.max_iter, 60), nullspace=False)
        traj = march(problem, x0, grid, opts, monitor=monitor, thin=10 ** 9,
                     stop=(lambda d: d.flow_rate < threshold) if bn > 0
                     else None)
        qs = [(d.time, d.flow_rate) for d in traj.diagnostics]
        lines = ["t,Q"] + [f"{float(t)!r},{float(q)!r}"
                           for t, q in [(0.0, q0)] + qs]
        with open(os.path.join(out, f"couette_Q_bn{bn:g}.csv"), "w") as f:
            f.write("\n".join(lines) + "\n")
        ceased = qs[-1][1] < threshold
        if ceased:
            cess_times[bn] = qs[-1][0]
        results[bn] = {"q": [q for _, q in qs], "ceased": ceased,
                       "time": qs[-1][0]}
        extras[f"bn_{bn:g}.steps"] = len(qs)
        extras[f"bn_{bn:g}.ceased"] = ceased
        extras[f"bn_{bn:g}.final_time"] = repr(float(qs[-1][0]))
        extras[f"bn_{bn:g}.final_Q"] = repr(float(qs[-1][1]))
    return (q0, results, cess_times), extras


def run_infsup_probe(cfg, out):
    lines = ["pair,n,beta"]
    results = {}
    for pair in ("taylor-hood", "scott-vogelius", "p1p1"):
        betas = []
        for n in cfg.levels:
            mesh = build_mesh(n, pair, cfg.pattern)
            _, V, P = element_pair_spaces(mesh, pair)
            beta = infsup_probe(V, P)
            betas.append(beta)
            lines.append(f"{pair},{n},{float(beta)!r}")
        results[pair] = betas
    with open(os.path.join(out, "infsup.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return results, {}


def run_graph_check(cfg, out):
    models = {
        "newtonian": Newtonian(nu=cfg.nu),
        "carreau": Carreau(nu=cfg.nu, eps=cfg.eps, r=cfg.r),
        "bingham": BinghamPapanastasiou(bn=max(cfg.bn, 1.0), m=cfg.m),
        "activated": ActivatedEulerNS(nu=cfg.nu, delta_s=cfg.delta_s,
                                      m=cfg.m),
    }
    lines = []
    all_ok = True
    rng = np.random.default_rng(0)
    for name, model in models.items():
        mono = check_monotone(model, sample_count=10000, seed=1)
        r = getattr(model, "r", 2.0)
        coer = check_coercive(model, r=r, sample_count=10000, seed=2,
                              lo=1e-3)
        # A1 and trace preservation at random points
        z = np.zeros(3)
        xs = rng.uniform(0, 1, size=(50, 2))
        a1 = float(np.max(np.abs(eval_residual(model, z, z, xs))))
        tf = rng.normal(size=(200, 3))
        tf[:, 1] = -tf[:, 0]
        if model.orientation == "stress":
            outs = model.stress(tf, xs[:1])
        else:
            outs = model.strain(tf, np.tile(model.center, (200, 1))
                                if hasattr(model, "center") else xs[:1])
        trace_max = float(np.max(np.abs(outs[:, 0] + outs[:, 1])))
        ok = mono.passed and coer.passed and a1 <= 1e-12 \
            and trace_max <= 1e-12 * max(1.0, float(frob_norm(outs).max()))
        all_ok &= ok
        lines.append(f"{name}: monotone={mono.passed} "
                     f"(min_inner={mono.min_inner:.2e}) "
                     f"coercive={coer.passed} (c={coer.c:.3e}, m={coer.m:g}) "
                     f"A1_max={a1:.1e} trace_max={trace_max:.1e} -> "
                     f"{'ok' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "graph_check.txt"), "w") as f:
        f.write(text)
    sys.stdout.write(text)
    if not all_ok:
        raise NewtonError("graph checks failed", None)
    return lines, {}


RUNNERS = {
    "carreau-steady": run_carreau_steady,
    "carreau-unsteady": run_carreau_unsteady,
    "penalty-study": run_penalty_study,
    "cavity-activated": run_cavity_activated,
    "couette-cessation": run_couette_cessation,
    "infsup-probe": run_infsup_probe,
    "graph-check": run_graph_check,
}


def run(cfg):
    """Execute one experiment; writes artifacts, returns (result, extras)."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    t0 = time.time()
    result, extras = RUNNERS[cfg.experiment](cfg, cfg.out_dir)
    extras["wall_clock_s"] = time.time() - t0
    if cfg.dump_mesh and cfg.experiment != "graph-check":
        n = cfg.levels[0] if cfg.levels else 2
        dump_mesh(build_mesh(n, cfg.pair, cfg.pattern),
                  os.path.join(cfg.out_dir, f"mesh_n{n}.txt"))
    write_report(os.path.join(cfg.out_dir, "report.txt"), cfg, extras)
    return result, extras


def self_check():
    """Quadrature, tangent, and graph self-tests (rheoflow check)."""
    import math
    from .quadrature import triangle_rule
    ok = True
    for degree in (1, 2, 3, 5, 8, 12):
        rule = triangle_rule(degree)
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                exact = math.factorial(i) * math.factorial(j) \
                    / math.factorial(i + j + 2)
                got = float(np.sum(rule.weights * rule.points[:, 0] ** i
                                   * rule.points[:, 1] ** j))
                if abs(got - exact) > 1e-13:
                    ok = False
    print(f"quadrature monomial exactness: {'ok' if ok else 'FAIL'}")

    rng = np.random.default_rng(0)
    models = [Newtonian(nu=0.5), Carreau(nu=0.5, eps=1e-5, r=1.5),
              BinghamPapanastasiou(bn=1.0, m=200.0),
              ActivatedEulerNS(nu=0.5, delta_s=2.5, m=200.0)]
    tan_ok = True
    for model in models:
        x = np.array([0.5, 0.5])
        s0, d0 = rng.normal(size=3), rng.normal(size=3)
        dgds, dgdd = eval_tangents(model, s0, d0, x)
        delta = rng.normal(size=3)
        best = np.inf
        for h in (1e-4, 1e-5, 1e-6, 1e-7):
            fd = (eval_residual(model, s0, d0 + h * delta, x)
                  - eval_residual(model, s0, d0 - h * delta, x)) / (2 * h)
            best = min(best, np.linalg.norm(dgdd @ delta - fd)
                       / max(np.linalg.norm(fd), 1e-14))
        if best > 1e-6:
            tan_ok = False
    print(f"analytic tangents vs finite differences: "
          f"{'ok' if tan_ok else 'FAIL'}")

    graph_ok = True
    for model in models:
        if not check_monotone(model, 2000, seed=3).passed:
            graph_ok = False
    print(f"graph monotonicity: {'ok' if graph_ok else 'FAIL'}")
    return ok and tan_ok and graph_ok


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="rheoflow",
        description="three-field FEM for implicitly constituted flows")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment config")
    runp.add_argument("config")
    runp.add_argument("--out", default=None, help="output directory")
    runp.add_argument("--threads", type=int, default=1)
    runp.add_argument("--dump-mesh", action="store_true")
    sub.add_parser("check", help="quadrature/tangent/graph self-tests")

    args = parser.parse_args(argv)
    if args.command == "check":
        return 0 if self_check() else 3

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        cfg.out_dir = args.out
    cfg.threads = args.threads
    cfg.dump_mesh = args.dump_mesh
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        run(cfg)
    except NewtonError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
