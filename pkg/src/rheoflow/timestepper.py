"""Implicit Euler marching of the three-field system.

Includes the constrained L2 projection of the initial velocity onto the
discretely divergence-free subspace, 3-point Gauss time averages of the
forcing, the piecewise constant/linear time interpolants, and a per-step
energy ledger (valid for homogeneous Dirichlet data).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import frob_inner
from .fespace import DiscreteField
from .forms import (LinearSolveError, ThreeFieldState, strain_from_gradient)
from .solver import NewtonOptions, newton_solve

_GAUSS3_NODES = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GAUSS3_WEIGHTS = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


@dataclass(frozen=True)
class TimeGrid:
    tau: float
    T: float

    def __post_init__(self):
        if self.tau <= 0 or self.T <= 0:
            raise ValueError("tau and T must be positive")
        steps = self.T / self.tau
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("T / tau must be an integer")

    @property
    def steps(self):
        return int(round(self.T / self.tau))

    def node(self, j):
        return j * self.tau


def time_average_forcing(f, grid, j):
    """Mean of f over (t_{j-1}, t_j) by 3-point Gauss; returns f_j(x)."""
    if not 1 <= j <= grid.steps:
        raise ValueError(f"step index {j} outside 1..{grid.steps}")
    t0, t1 = grid.node(j - 1), grid.node(j)
    mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
    times = mid + half * _GAUSS3_NODES
    weights = 0.5 * _GAUSS3_WEIGHTS

    def f_j(x):
        return sum(w * np.asarray(f(t, x), dtype=float)
                   for w, t in zip(weights, times))

    return f_j


def l2_div_project(u0, velocity_space, pressure_space, bc_dofs=(),
                   quad_degree=7):
    """Constrained L2 projection onto discretely divergence-free velocities.

    Solves: int u_h . w - int p_h div w = int u0 . w for all free w, and
    int q div u_h = 0 for all q, with the listed velocity dofs pinned to
    zero. Returns the velocity DiscreteField.
    """
    from .forms import mesh_quadrature

    mesh = velocity_space.mesh
    nU, nP = velocity_space.dim, pressure_space.dim
    groups = mesh_quadrature(mesh, quad_degree)

    rows, cols, vals = [], [], []
    rhs = np.zeros(nU + nP)
    bc_dofs = np.asarray(list(bc_dofs), dtype=np.int64)
    mask = np.zeros(nU, dtype=bool)
    mask[bc_dofs] = True

    for grp in groups:
        phiU, gphiU = grp.tables(velocity_space)
        phiP, _ = grp.tables(pressure_space)
        eU = velocity_space.cell_dofs[grp.cells]
        eP = nU + pressure_space.cell_dofs[grp.cells]
        c, nlU, nlP = len(grp.cells), phiU.shape[1], phiP.shape[1]

        mloc = np.einsum("cq,qm,qn->cmn", grp.wdet, phiU, phiU)
        M = (mloc[:, :, None, :, None]
             * np.eye(2)[None, None, :, None, :]).reshape(c, 2 * nlU, 2 * nlU)
        BUP = -np.einsum("cq,cqmi,qn->cmin", grp.wdet, gphiU,
                         phiP).reshape(c, 2 * nlU, nlP)
        BPU = np.einsum("cq,qm,cqni->cmni", grp.wdet, phiP,
                        gphiU).reshape(c, nlP, 2 * nlU)
        f0 = np.asarray(u0(grp.points), dtype=float)
        b = np.einsum("cq,qm,cqi->cmi", grp.wdet, phiU, f0).reshape(c, -1)

        rmask = mask[eU]

        def add(rd, cd, mat, rowmask=None):
            if rowmask is not None:
                mat = np.where(rowmask[:, :, None], 0.0, mat)
            _, nr, ncn = mat.shape
            rows.append(np.repeat(rd, ncn, axis=1).ravel())
            cols.append(np.tile(cd, (1, nr)).ravel())
            vals.append(mat.ravel())

        add(eU, eU, M, rmask)
        add(eU, eP, BUP, rmask)
        add(eP, eU, BPU)
        b = np.where(rmask, 0.0, b)
        rhs[:nU] += np.bincount(eU.ravel(), b.ravel(), minlength=nU)

    if len(bc_dofs):
        rows.append(bc_dofs)
        cols.append(bc_dofs)
        vals.append(np.ones(len(bc_dofs)))

    # border against constant pressures when the boundary is fully pinned
    bdry = velocity_space.dofs_of_nodes(velocity_space.boundary_nodes(None))
    pure_dirichlet = np.all(mask[bdry]) if len(bc_dofs) else False
    n = nU + nP + (1 if pure_dirichlet else 0)
    if pure_dirichlet:
        w = np.zeros(nP)
        for grp in groups:
            phiP, _ = grp.tables(pressure_space)
            np.add.at(w, pressure_space.cell_dofs[grp.cells],
                      np.einsum("cq,qm->cm", grp.wdet, phiP))
        pidx = nU + np.arange(nP)
        rows.extend([pidx, np.full(nP, nU + nP)])
        cols.extend([np.full(nP, nU + nP), pidx])
        vals.extend([w, w])
        rhs = np.concatenate([rhs, [0.0]])

    mat = sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows).astype(np.int64),
          np.concatenate(cols).astype(np.int64))), shape=(n, n)).tocsc()
    try:
        sol = spla.splu(mat).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveError(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise LinearSolveError("projection solve returned non-finite values")
    return DiscreteField(velocity_space, sol[:nU])


# -- marching -----------------------------------------------------------------

@dataclass
class StepDiagnostics:
    index: int
    time: float
    newton_iterations: int
    residual_norm: float
    energy: float
    energy_residual: Optional[float] = None
    flow_rate: Optional[float] = None


@dataclass
class Trajectory:
    grid: TimeGrid
    states: list = field(default_factory=list)     # coefficient vectors or None
    diagnostics: list = field(default_factory=list)

    def state_vector(self, j):
        x = self.states[j]
        if x is None:
            raise ValueError(f"state {j} was thinned out")
        return x


def energy_ledger(problem, x, x_prev, f_j=None, quad_degree=7):
    """Residual of the discrete energy identity for one converged step.

    (1/2)(|u|^2 - |u_prev|^2 + |u - u_prev|^2) + tau int S : D(u)
    + (tau/l) |u|_{2r'}^{2r'} - tau <f_j, u>; zero (to solver tolerance) for
    homogeneous Dirichlet data.
    """
    from .forms import mesh_quadrature

    prm = problem.params
    tau = prm.tau
    nS, nU = problem.nS, problem.nU
    uv = x[nS:nS + nU]
    upv = x_prev[nS:nS + nU]
    Sv = x[:nS]
    total = 0.0
    for grp in mesh_quadrature(problem.mesh, quad_degree):
        u = grp.values(problem.u_space, uv)
        up = grp.values(problem.u_space, upv)
        S = grp.values(problem.S_space, Sv)
        D = strain_from_gradient(grp.gradients(problem.u_space, uv))
        w = grp.wdet
        usq = (u ** 2).sum(axis=-1)
        upsq = (up ** 2).sum(axis=-1)
        dsq = ((u - up) ** 2).sum(axis=-1)
        total += float(np.sum(w * (0.5 * (usq - upsq + dsq))))
        total += tau * float(np.sum(w * frob_inner(S, D)))
        if prm.inv_l:
            rp = prm.r_conj
            total += tau * prm.inv_l * float(np.sum(w * usq ** rp))
        if f_j is not None:
            fv = np.asarray(f_j(grp.points), dtype=float)
            total -= tau * float(np.sum(w * (fv * u).sum(axis=-1)))
    return total


def interpolate_stress(stress_space, velocity_field, model):
    """Cellwise interpolation of the constitutive stress at D(u_h).

    Only meaningful for stress-explicit models; returns zeros otherwise.
    Used to build a consistent initial stress for the first time step.
    """
    if getattr(model, "orientation", None) != "stress":
        return DiscreteField(stress_space)
    vspace = velocity_field.space
    mesh = stress_space.mesh
    ref = stress_space.reference_nodes()
    _, gref = vspace.tabulate(ref)
    gphi = np.einsum("cij,qmj->cqmi", mesh.inv_jac_t, gref)
    coeffs = velocity_field.coeffs[vspace.cell_dofs].reshape(
        mesh.num_cells, vspace.num_local_nodes, 2)
    grad = np.einsum("cqmj,cmk->cqkj", gphi, coeffs)
    d = np.stack([grad[..., 0, 0], grad[..., 1, 1],
                  0.5 * (grad[..., 0, 1] + grad[..., 1, 0])], axis=-1)
    nodes = stress_space.node_coords.reshape(mesh.num_cells, -1, 2)
    s = model.stress(d, nodes)
    return DiscreteField(stress_space, s.reshape(-1))


class _CachedPointwise:
    """Memoize a pointwise function on the (fixed) quadrature point arrays."""

    def __init__(self, func):
        self.func = func
        self._cache = {}

    def __call__(self, points):
        key = id(points)
        if key not in self._cache:
            self._cache[key] = np.asarray(self.func(points), dtype=float)
        return self._cache[key]


def step(problem, prev, grid, j, options=None, forcing=None):
    """Advance one implicit Euler step; returns (x_j, NewtonHistory)."""
    if forcing is not None:
        problem.params.forcing = _CachedPointwise(forcing)
    x, hist = newton_solve(problem, prev, options, u_prev=prev[
        problem.nS:problem.nS + problem.nU])
    return x, hist


def march(problem, x0, grid, options=None, forcing_fn=None, bc_fn=None,
          monitor=None, thin=1, steady_rtol=None, predictor="linear",
          stop=None):
    """Implicit Euler loop from the initial state vector x0.

    forcing_fn(grid, j) supplies the time-averaged load of step j; bc_fn(t)
    returns the DirichletBC list at time t (same markers/components layout
    as the problem was built with). monitor(problem, j, x, x_prev) may
    return extra diagnostics (dict). States are stored every `thin` steps
    (and always the last). steady_rtol stops early when
    |u_j - u_{j-1}| / tau <= steady_rtol * |u_j|. The Newton initial guess
    extrapolates linearly from the two previous levels (predictor="linear");
    predictor="previous" starts from the last level.
    """
    if options is None:
        options = NewtonOptions(nullspace=problem.nullspace)
    traj = Trajectory(grid)
    x = np.asarray(x0, dtype=float)
    traj.states.append(x.copy())
    nS, nU = problem.nS, problem.nU
    x_older = None

    for j in range(1, grid.steps + 1):
        if bc_fn is not None:
            problem.bcs[:] = bc_fn(grid.node(j))
        if forcing_fn is not None:
            problem.params.forcing = _CachedPointwise(forcing_fn(grid, j))
        x_prev = x
        if predictor == "linear" and x_older is not None:
            guess = 2.0 * x_prev - x_older
        else:
            guess = x_prev
        x, hist = newton_solve(problem, guess, options,
                               u_prev=x_prev[nS:nS + nU])
        x_older = x_prev
        keep = (j % thin == 0) or (j == grid.steps)
        traj.states.append(x.copy() if keep else None)

        u = x[nS:nS + nU]
        du = u - x_prev[nS:nS + nU]
        diag = StepDiagnostics(
            index=j, time=grid.node(j),
            newton_iterations=hist.iterations,
            residual_norm=hist.residuals[-1],
            energy=float(u @ u))
        if monitor is not None:
            extra = monitor(problem, j, x, x_prev) or {}
            for key, val in extra.items():
                setattr(diag, key, val)
        traj.diagnostics.append(diag)

        done = False
        if steady_rtol is not None:
            done = np.linalg.norm(du) / grid.tau \
                <= steady_rtol * np.linalg.norm(u)
        if stop is not None and stop(diag):
            done = True
        if done:
            if traj.states[-1] is None:
                traj.states[-1] = x.copy()
            break
    return traj


def interpolant_eval(traj, t, kind="constant"):
    """Evaluate the piecewise constant or linear time interpolant at t.

    The constant interpolant is right-continuous on half-open intervals:
    t in (t_{j-1}, t_j] maps to state j.
    """
    grid = traj.grid
    if t < -1e-14 or t > grid.T + 1e-14:
        raise ValueError("t outside [0, T]")
    if kind == "constant":
        j = int(np.ceil(t / grid.tau - 1e-12))
        j = min(max(j, 0), grid.steps)
        return traj.state_vector(j)
    if kind == "linear":
        j = int(np.ceil(t / grid.tau - 1e-12))
        j = min(max(j, 1), grid.steps)
        t0, t1 = grid.node(j - 1), grid.node(j)
        lam = (t - t0) / grid.tau
        return (1.0 - lam) * traj.state_vector(j - 1) \
            + lam * traj.state_vector(j)
    raise ValueError(f"unknown interpolant kind {kind!r}")
