"""Acceptance suite: one test per criterion, printed pass/fail lines.

Heavy convergence studies run the real experiment drivers at the benchmark
parameters; results are cached per session. Run with `pytest
tests/test_acceptance.py -s` to watch the per-criterion lines.
"""

import time

import numpy as np
import pytest

from rheoflow import cli
from rheoflow.analysis import infsup_probe
from rheoflow.constitutive import (ActivatedEulerNS, BinghamPapanastasiou,
                                   Carreau, Newtonian, check_monotone,
                                   eval_residual, eval_tangents, frob_norm,
                                   trace)
from rheoflow.fespace import DiscreteField, element_pair_spaces, interpolate
from rheoflow.forms import DirichletBC, FormParams, ThreeFieldProblem
from rheoflow.mesh import barycentric_refine, unit_square_mesh
from rheoflow.solver import NewtonOptions, newton_solve
from rheoflow.timestepper import (TimeGrid, energy_ledger, l2_div_project,
                                  march)
from rheoflow.analysis import divergence_l2, eoc, field_lp_norm


def announce(criterion, passed, detail):
    mark = "PASS" if passed else "FAIL"
    print(f"[{mark}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


@pytest.fixture(scope="session")
def table1():
    cfg = cli.RunConfig(experiment="carreau-steady", r=1.5,
                        levels=[2, 4, 8, 16, 32],
                        out_dir="acceptance_out/table1")
    t0 = time.time()
    table, _ = cli.run(cfg)
    table.wall = time.time() - t0
    return table


@pytest.fixture(scope="session")
def table2():
    cfg = cli.RunConfig(experiment="carreau-steady", r=1.8,
                        levels=[2, 4, 8, 16, 32],
                        out_dir="acceptance_out/table2")
    table, _ = cli.run(cfg)
    return table


@pytest.fixture(scope="session")
def table3():
    cfg = cli.RunConfig(experiment="carreau-unsteady", r=1.7,
                        levels=[2, 4, 8, 16], tau=1e-3, T=0.1,
                        out_dir="acceptance_out/table3")
    t0 = time.time()
    table, _ = cli.run(cfg)
    table.wall = time.time() - t0
    return table


def test_criterion_1_table1_steady_r15(table1):
    rates = table1.rates()
    f_two_finest = rates["F"][-2:]
    ok_f = all(abs(r - 1.0) <= 0.05 for r in f_two_finest)
    ok_p = abs(rates["p_Lrp"][-1] - 0.667) <= 0.1
    ok_s = abs(rates["S_Lrp"][-1] - 0.672) <= 0.1
    ok_t = table1.wall <= 15 * 60
    announce(
        "criterion 1 (Table 1, steady r=1.5)",
        ok_f and ok_p and ok_s and ok_t,
        f"F-EOC finest two {f_two_finest[0]:.4f}/{f_two_finest[1]:.4f} "
        f"(1.0+-0.05), p-EOC {rates['p_Lrp'][-1]:.4f} (0.667+-0.1), "
        f"S-EOC {rates['S_Lrp'][-1]:.4f} (0.672+-0.1), "
        f"wall {table1.wall:.0f}s (<=900s)")


def test_criterion_2_table2_steady_r18(table2):
    rates = table2.rates()
    ok_f = abs(rates["F"][-1] - 1.0) <= 0.05
    ok_p = abs(rates["p_Lrp"][-1] - 0.889) <= 0.1
    announce(
        "criterion 2 (Table 2, steady r=1.8)",
        ok_f and ok_p,
        f"F-EOC finest {rates['F'][-1]:.4f} (1.0+-0.05), "
        f"p-EOC {rates['p_Lrp'][-1]:.4f} (0.889+-0.1)")


def test_criterion_3_table3_unsteady_r17(table3):
    rates = table3.rates()
    ok_f = abs(rates["F_L2Q"][-1] - 1.0) <= 0.1
    ok_u = rates["u_LinfL2"][-1] >= 1.5
    ok_t = table3.wall <= 45 * 60
    announce(
        "criterion 3 (Table 3, unsteady r=1.7, rows 1-4)",
        ok_f and ok_u and ok_t,
        f"F-EOC row4 {rates['F_L2Q'][-1]:.4f} (1.0+-0.1), "
        f"u-EOC row4 {rates['u_LinfL2'][-1]:.4f} (>=1.5), "
        f"wall {table3.wall:.0f}s (<=2700s)")


def test_criterion_4_penalty_study():
    cfg = cli.RunConfig(experiment="penalty-study", r=1.3, inv_l=1.0,
                        levels=[2, 4, 8, 16, 32],
                        out_dir="acceptance_out/penalty")
    tables, _ = cli.run(cfg)
    detail = []
    ok = True
    for label, table in tables.items():
        rates = table.rates()["F"][-2:]
        good = all(abs(r - 1.0) <= 0.1 for r in rates)
        ok &= good
        detail.append(f"{label} F-EOC {rates[0]:.4f}/{rates[1]:.4f}")
    announce("criterion 4 (penalty study r=1.3, Tables 4a/4b)", ok,
             "; ".join(detail) + " (1.0+-0.1 at two finest)")


# -- criterion 5: property suite ------------------------------------------------

MODELS = [Newtonian(nu=0.5), Carreau(nu=0.5, eps=1e-5, r=1.5),
          BinghamPapanastasiou(bn=1.0, m=200.0),
          ActivatedEulerNS(nu=0.5, delta_s=2.5, m=200.0)]


def test_criterion_5a_jacobian_fd():
    worst = 0.0
    for model in MODELS:
        mesh = unit_square_mesh(2)
        S, V, P = element_pair_spaces(mesh, "taylor-hood")
        params = FormParams(tau=0.1, inv_l=0.5, r=getattr(model, "r", 2.0),
                            convection=True, b_variant="skew")
        bcs = [DirichletBC((1, 2, 3, 4), lambda x: np.zeros_like(x))]
        problem = ThreeFieldProblem(S, V, P, model, params, bcs)
        rng = np.random.default_rng(11)
        x = problem.apply_bcs(0.5 * rng.normal(size=problem.dim))
        u_prev = 0.1 * rng.normal(size=problem.nU)
        jac = problem.jacobian(x).tocsr()
        delta = rng.normal(size=problem.dim)
        jv = jac @ delta
        best = np.inf
        for h in (1e-4, 1e-5, 1e-6, 1e-7):
            fd = (problem.residual(x + h * delta, u_prev)
                  - problem.residual(x - h * delta, u_prev)) / (2 * h)
            best = min(best, np.linalg.norm(jv - fd)
                       / max(np.linalg.norm(fd), 1e-14))
        worst = max(worst, best)
    announce("criterion 5a (Jacobian vs finite differences)", worst <= 1e-6,
             f"worst relative mismatch {worst:.2e} (<=1e-6) over 4 models")


def test_criterion_5b_monotonicity():
    worst = np.inf
    for model in MODELS:
        rep = check_monotone(model, sample_count=10000, seed=20)
        worst = min(worst, rep.min_inner)
        if not rep.passed:
            break
    announce("criterion 5b (graph monotonicity A2)", worst >= -1e-12,
             f"min (S1-S2):(D1-D2) = {worst:.2e} over 1e4 pairs per model")


def test_criterion_5c_origin_and_trace():
    rng = np.random.default_rng(3)
    worst_a1 = 0.0
    worst_tr = 0.0
    for model in MODELS:
        xs = rng.uniform(0, 1, size=(100, 2))
        z = np.zeros((100, 3))
        worst_a1 = max(worst_a1, float(np.abs(
            eval_residual(model, z, z, xs)).max()))
        t = rng.normal(size=(500, 3))
        t[:, 1] = -t[:, 0]
        if model.orientation == "stress":
            out = model.stress(t, xs[:1])
        else:
            out = model.strain(t, np.tile((0.5, 0.5), (500, 1)))
        scale = max(1.0, float(frob_norm(out).max()))
        worst_tr = max(worst_tr, float(np.abs(trace(out)).max()) / scale)
    announce("criterion 5c (A1 origin and A6 trace preservation)",
             worst_a1 <= 1e-12 and worst_tr <= 1e-12,
             f"A1 max |G(0,0)| = {worst_a1:.1e}, "
             f"trace leakage {worst_tr:.1e} (<=1e-12)")


def test_criterion_5d_skew_self_annihilation():
    from rheoflow.forms import trilinear_b
    mesh = unit_square_mesh(3)
    _, V, _ = element_pair_spaces(mesh, "taylor-hood")
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(3):
        u = DiscreteField(V, rng.normal(size=V.dim))
        scale = max(1.0, float(np.abs(u.coeffs).max()) ** 3)
        worst = max(worst, abs(trilinear_b(u, u, u, "skew")) / scale)
    announce("criterion 5d (skew B(v,v,v) = 0)", worst <= 1e-12,
             f"max |B(v,v,v)|/scale = {worst:.1e}")


def test_criterion_5e_energy_identity():
    mesh = unit_square_mesh(3)
    S, V, P = element_pair_spaces(mesh, "taylor-hood")
    bcs = [DirichletBC((1, 2, 3, 4), lambda x: np.zeros_like(x))]
    model = Carreau(nu=0.5, eps=1e-3, r=1.8)
    params = FormParams(tau=0.02, inv_l=0.5, r=1.8, convection=True,
                        b_variant="skew")
    problem = ThreeFieldProblem(S, V, P, model, params, bcs)
    bc = V.dofs_of_nodes(V.boundary_nodes(None))

    def u0(x):
        sx, sy = np.sin(np.pi * x[..., 0]), np.sin(np.pi * x[..., 1])
        cx, cy = np.cos(np.pi * x[..., 0]), np.cos(np.pi * x[..., 1])
        return np.stack([sx * sx * sy * cy, -sx * cx * sy * sy], axis=-1)

    proj = l2_div_project(u0, V, P, bc_dofs=bc)
    x = np.zeros(problem.dim)
    x[problem.nS:problem.nS + problem.nU] = proj.coeffs
    opts = NewtonOptions(nullspace=problem.nullspace)
    worst = 0.0
    for j in range(1, 6):
        x_prev = x
        x, _ = newton_solve(problem, x_prev, opts,
                            u_prev=x_prev[problem.nS:problem.nS + problem.nU])
        worst = max(worst, abs(energy_ledger(problem, x, x_prev)))
    tol = 10 * (opts.atol + 1e-9)
    announce("criterion 5e (discrete energy identity)", worst <= tol,
             f"max ledger residual {worst:.2e} (<= {tol:.1e}) over 5 steps")


def test_criterion_5f_divfree_scott_vogelius():
    mesh = barycentric_refine(unit_square_mesh(4))
    S, V, P = element_pair_spaces(mesh, "scott-vogelius")
    bcs = [DirichletBC((1, 2, 4), lambda x: np.zeros_like(x)),
           DirichletBC((3,), lambda x: np.stack(
               [16 * x[:, 0]**2 * (1 - x[:, 0])**2 * x[:, 1]**2,
                np.zeros(len(x))], axis=-1))]
    model = Carreau(nu=0.5, eps=1e-3, r=1.8)
    problem = ThreeFieldProblem(S, V, P, model,
                                FormParams(convection=True,
                                           b_variant="divfree"), bcs)
    x, _ = newton_solve(problem, np.zeros(problem.dim),
                        NewtonOptions(nullspace=True))
    div = divergence_l2(DiscreteField(V, x[S.dim:S.dim + V.dim]))
    announce("criterion 5f (Scott-Vogelius exactly divergence-free)",
             div <= 1e-10, f"||div u_h||_L2 = {div:.2e} (<=1e-10)")


def test_criterion_5g_quadrature_exactness():
    import math
    from rheoflow.quadrature import triangle_rule
    worst = 0.0
    for degree in range(1, 21):
        rule = triangle_rule(degree)
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                exact = math.factorial(i) * math.factorial(j) \
                    / math.factorial(i + j + 2)
                got = float(np.sum(rule.weights * rule.points[:, 0] ** i
                                   * rule.points[:, 1] ** j))
                worst = max(worst, abs(got - exact))
    announce("criterion 5g (quadrature monomial exactness, degrees 1-20)",
             worst <= 2e-14, f"worst monomial defect {worst:.1e}")


def test_criterion_5h_eoc_exact_on_power_data():
    hs = [0.5 / 2 ** i for i in range(6)]
    errs = [2.31 * h ** 1.4142 for h in hs]
    rates = eoc(errs, hs)
    worst = max(abs(r - 1.4142) for r in rates[1:])
    announce("criterion 5h (eoc exact on synthetic power data)",
             worst <= 1e-12, f"max rate defect {worst:.1e}")


def test_criterion_6_infsup():
    stable = {}
    for pair, bary in (("taylor-hood", False), ("scott-vogelius", True)):
        betas = []
        for n in (2, 4, 8):
            mesh = unit_square_mesh(n)
            if bary:
                mesh = barycentric_refine(mesh)
            _, V, P = element_pair_spaces(mesh, pair)
            betas.append(infsup_probe(V, P))
        stable[pair] = betas
    control = []
    for n in (2, 4, 8):
        _, V, P = element_pair_spaces(unit_square_mesh(n), "p1p1")
        control.append(infsup_probe(V, P))

    ok = True
    detail = []
    for pair, betas in stable.items():
        spread = (max(betas) - min(betas)) / max(betas)
        ok &= spread <= 0.2 and min(betas) > 0
        detail.append(f"{pair} beta={betas[0]:.3f}..{betas[-1]:.3f} "
                      f"spread {100 * spread:.1f}%")
    monotone = control[1] < control[0] and control[2] < control[1]
    geo = (control[-1] / control[0]) ** (1 / (len(control) - 1))
    ok &= monotone and geo <= 0.7
    detail.append(f"p1p1 {control[0]:.3f}->{control[2]:.3f} "
                  f"(monotone, mean drop {100 * (1 - geo):.0f}%/level)")
    announce("criterion 6 (inf-sup probe)", ok, "; ".join(detail))


@pytest.fixture(scope="session")
def couette():
    cfg = cli.RunConfig(experiment="couette-cessation",
                        out_dir="acceptance_out/couette")
    t0 = time.time()
    (q0, results, cess), _ = cli.run(cfg)
    return q0, results, cess, time.time() - t0


def test_criterion_7_couette_cessation(couette):
    q0, results, cess, wall = couette
    ok_q0 = abs(q0 - 0.5) <= 1e-12
    ok_monotone = all(
        all(r["q"][i + 1] < r["q"][i] for i in range(len(r["q"]) - 1))
        for r in results.values())
    pos = sorted(bn for bn in results if bn > 0)
    ok_ceased = all(results[bn]["ceased"] for bn in pos)
    times = [cess[bn] for bn in pos]
    ok_order = all(times[i + 1] < times[i] for i in range(len(times) - 1))
    ok_newtonian = not results[0.0]["ceased"]
    ok_t = wall <= 20 * 60
    announce(
        "criterion 7 (Couette cessation)",
        ok_q0 and ok_monotone and ok_ceased and ok_order and ok_newtonian
        and ok_t,
        f"Q0={q0!r}, cessation times " +
        ", ".join(f"Bn={bn:g}: {cess[bn]:.4f}" for bn in pos) +
        f", Bn=0 not ceased by t={results[0.0]['time']:.4f}, "
        f"all Q(t) strictly decreasing, wall {wall:.0f}s (<=1200s)")


def test_criterion_8_activated_cavity():
    cfg = cli.RunConfig(experiment="cavity-activated", levels=[16],
                        m_stages=[10.0, 50.0, 200.0], delta_s=2.5, nu=0.5,
                        out_dir="acceptance_out/cavity")
    t0 = time.time()
    (x, problem), extras = cli.run(cfg)
    wall = time.time() - t0
    ratio = float(extras["disk_low_strain_stress_ratio"])
    ok_ratio = ratio <= 0.05

    # delta_s = 0 reproduces the Newtonian cavity
    mesh = problem.mesh
    S, V, P = problem.S_space, problem.u_space, problem.p_space
    bcs = problem.bcs
    params = problem.params
    opts = NewtonOptions(nullspace=True)
    newt = ThreeFieldProblem(S, V, P, Newtonian(nu=0.5), params, bcs)
    x_newt, _ = newton_solve(newt, np.zeros(newt.dim), opts)
    act0 = ThreeFieldProblem(S, V, P,
                             ActivatedEulerNS(nu=0.5, delta_s=0.0, m=200.0),
                             params, bcs)
    x_act, _ = newton_solve(act0, x_newt, opts)
    du = np.abs(x_act[S.dim:S.dim + V.dim]
                - x_newt[S.dim:S.dim + V.dim]).max()
    ok_newt = du <= 1e-8
    ok_t = wall <= 20 * 60
    announce(
        "criterion 8 (activated cavity)",
        ok_ratio and ok_newt and ok_t,
        f"low-strain |S| <= {ratio:.4f} * max|S| (<=0.05), "
        f"delta_s=0 vs Newtonian max|du|={du:.1e} (<=1e-8), "
        f"wall {wall:.0f}s (<=1200s)")
