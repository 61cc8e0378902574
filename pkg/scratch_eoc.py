"""Scratch: prototype Table-1 steady Carreau EOC at coarse levels."""
import time

import numpy as np

from rheoflow.analysis import (ManufacturedSolution, eoc, field_error_lp,
                               natural_distance, velocity_error_w1r,
                               manufactured_forcing)
from rheoflow.constitutive import Carreau, Newtonian
from rheoflow.fespace import element_pair_spaces
from rheoflow.forms import DirichletBC, FormParams, ThreeFieldProblem, mesh_quadrature
from rheoflow.mesh import barycentric_refine, unit_square_mesh
from rheoflow.solver import NewtonOptions, newton_solve

r = 1.5
sol = ManufacturedSolution(a=1.01, b=2 / r - 0.99, r=r, nu=0.5, eps=1e-5)
model = Carreau(nu=0.5, eps=1e-5, r=r)
forcing = manufactured_forcing(sol, "steady-noconv")

errs = {"F": [], "u": [], "p": [], "S": []}
hs = []
for n in (2, 4, 8, 16):
    t0 = time.time()
    mesh = barycentric_refine(unit_square_mesh(n))
    S, V, P = element_pair_spaces(mesh, "scott-vogelius")
    bcs = [DirichletBC((1, 2, 3, 4), lambda x: sol.velocity(1.0, x))]
    params = FormParams(forcing=lambda x: forcing(1.0, x))
    problem = ThreeFieldProblem(S, V, P, model, params, bcs,
                                quad_degree=7, singular_point=(0.0, 0.0))
    # Stokes initial guess
    stokes = ThreeFieldProblem(S, V, P, Newtonian(nu=0.5), params, bcs,
                               quad_degree=7, singular_point=(0.0, 0.0))
    opts = NewtonOptions(nullspace=True)
    x0, h0 = newton_solve(stokes, np.zeros(stokes.dim), opts)
    x, hist = newton_solve(problem, x0, opts)
    t1 = time.time()

    groups = mesh_quadrature(mesh, 8, singular_point=(0.0, 0.0))
    from rheoflow.fespace import DiscreteField
    u_h = DiscreteField(V, x[S.dim:S.dim + V.dim])
    p_h = DiscreteField(P, x[S.dim + V.dim:])
    s_h = DiscreteField(S, x[:S.dim])
    eF = natural_distance(u_h, lambda pts: sol.strain(1.0, pts), r, 1e-5,
                          groups=groups)
    eu = velocity_error_w1r(u_h, lambda pts: sol.velocity(1.0, pts),
                            lambda pts: sol.velocity_gradient(1.0, pts), r,
                            groups=groups)
    rp = r / (r - 1)
    ep = field_error_lp(p_h, lambda pts: sol.pressure(1.0, pts), rp,
                        groups=groups, mean_adjust=True)
    eS = field_error_lp(s_h, lambda pts: sol.stress(1.0, pts), rp,
                        groups=groups)
    t2 = time.time()
    from rheoflow.analysis import divergence_l2
    divu = divergence_l2(u_h)
    errs["F"].append(eF); errs["u"].append(eu); errs["p"].append(ep); errs["S"].append(eS)
    hs.append(1.0 / n)
    print(f"n={n:3d} its={hist.iterations:2d} solve={t1-t0:6.2f}s err={t2-t1:5.2f}s "
          f"F={eF:.4e} u={eu:.4e} p={ep:.4e} S={eS:.4e} div={divu:.2e}")

for k in errs:
    print(k, ["None" if r_ is None else f"{r_:.4f}" for r_ in eoc(errs[k], hs)])
