"""Scratch: prototype unsteady Carreau (Table-3) rows."""
import time

import numpy as np

from rheoflow.analysis import (ManufacturedSolution, eoc, natural_distance,
                               natural_transform, field_error_lp,
                               manufactured_forcing)
from rheoflow.constitutive import Carreau, frob_inner
from rheoflow.fespace import DiscreteField, element_pair_spaces
from rheoflow.forms import (DirichletBC, FormParams, ThreeFieldProblem,
                            mesh_quadrature, strain_from_gradient)
from rheoflow.mesh import barycentric_refine, unit_square_mesh
from rheoflow.solver import NewtonOptions, newton_solve
from rheoflow.timestepper import TimeGrid, march, time_average_forcing

r = 1.7
sol = ManufacturedSolution(a=1.01, b=2 / r - 0.99, r=r, nu=0.5, eps=1e-5,
                           unsteady=True)
model = Carreau(nu=0.5, eps=1e-5, r=r)
forcing = manufactured_forcing(sol, "unsteady-full")
T = 0.1

G3_NODES = np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)])
G3_W = np.array([5 / 9, 8 / 9, 5 / 9]) * 0.5

rows = [(2, 1e-3), (4, 5e-4), (8, 2.5e-4)]
errsF, errsU, hs = [], [], []
for n, tau in rows:
    t0 = time.time()
    mesh = barycentric_refine(unit_square_mesh(n))
    S, V, P = element_pair_spaces(mesh, "scott-vogelius")
    grid = TimeGrid(tau, T)

    def bc_fn(t):
        return [DirichletBC((1, 2, 3, 4), lambda x, t=t: sol.velocity(t, x))]

    params = FormParams(tau=tau, convection=True, b_variant="divfree", r=r)
    problem = ThreeFieldProblem(S, V, P, model, params, bc_fn(0.0),
                                quad_degree=7, singular_point=(0.0, 0.0))
    groups = mesh_quadrature(mesh, 8, singular_point=(0.0, 0.0))

    err_sq = 0.0
    err_inf = 0.0
    state = {"F2": 0.0, "umax": 0.0}

    def monitor(problem, j, x, x_prev):
        t1 = grid.node(j)
        t0_ = grid.node(j - 1)
        uv = x[problem.nS:problem.nS + problem.nU]
        # L2(Q) natural-distance accumulation over the slab (Gauss-3)
        acc = 0.0
        for gn, gw in zip(G3_NODES, G3_W):
            tg = 0.5 * (t0_ + t1) + 0.5 * tau * gn
            for grp in groups:
                Dh = strain_from_gradient(grp.gradients(problem.u_space, uv))
                dF = natural_transform(sol.strain(tg, grp.points), r, 1e-5) \
                    - natural_transform(Dh, r, 1e-5)
                acc += gw * float(np.sum(grp.wdet * frob_inner(dF, dF)))
        state["F2"] += tau * acc
        # L-inf-in-time L2 velocity error at the node
        u_field = DiscreteField(problem.u_space, uv)
        e = field_error_lp(u_field, lambda p: sol.velocity(t1, p), 2.0,
                           groups=groups)
        state["umax"] = max(state["umax"], e)
        return {}

    x0 = np.zeros(problem.dim)
    traj = march(problem, x0, grid,
                 NewtonOptions(nullspace=True),
                 forcing_fn=lambda g, j: time_average_forcing(forcing, g, j),
                 bc_fn=bc_fn, monitor=monitor, thin=10**9)
    its = np.mean([d.newton_iterations for d in traj.diagnostics])
    errsF.append(np.sqrt(state["F2"]))
    errsU.append(state["umax"])
    hs.append(1.0 / n)
    print(f"n={n:3d} tau={tau:g} steps={grid.steps} avg_its={its:.2f} "
          f"F={errsF[-1]:.5e} u={errsU[-1]:.5e}  [{time.time()-t0:.1f}s]")

print("EOC F:", ["None" if x is None else f"{x:.4f}" for x in eoc(errsF, hs)])
print("EOC u:", ["None" if x is None else f"{x:.4f}" for x in eoc(errsU, hs)])
