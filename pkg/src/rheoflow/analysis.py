"""Error norms, convergence rates, flow diagnostics, and exact solutions.

The manufactured family is u = T(t) |x|^(a-1) (x2, -x1), p = T(t)^2 |x|^b
with T(t) = t for the unsteady variant and 1 for the steady one; it is
pointwise divergence-free and its closed-form Carreau stress divergence,
convection and pressure gradient define the forcing. All evaluators send
x = 0 to the zero limit; quadrature points never sit on the origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .constitutive import FROB_WEIGHTS, frob_inner, frob_norm, carreau_stress
from .forms import mesh_quadrature, strain_from_gradient


# -- manufactured solutions --------------------------------------------------

@dataclass(frozen=True)
class ManufacturedSolution:
    a: float
    b: float
    r: float
    nu: float
    eps: float
    unsteady: bool = False

    def __post_init__(self):
        if not self.a > 1.0:
            raise ValueError("require a > 1")
        if not self.b > 2.0 / self.r - 1.0:
            raise ValueError("require b > 2/r - 1")

    def _tfac(self, t):
        return t if self.unsteady else 1.0

    def _rho(self, x):
        return np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)

    def _pow(self, rho, expo):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = rho ** expo
        return np.where(rho > 0.0, out, 0.0)

    def velocity(self, t, x):
        x = np.asarray(x, dtype=float)
        amp = self._tfac(t) * self._pow(self._rho(x), self.a - 1.0)
        return np.stack([amp * x[..., 1], -amp * x[..., 0]], axis=-1)

    def pressure(self, t, x):
        x = np.asarray(x, dtype=float)
        return self._tfac(t) ** 2 * self._pow(self._rho(x), self.b)

    def pressure_mean(self, t, area_groups):
        """Domain mean of the exact pressure over quadrature groups."""
        num = sum(float(np.sum(g.wdet * self.pressure(t, g.points)))
                  for g in area_groups)
        den = sum(float(np.sum(g.wdet)) for g in area_groups)
        return num / den

    def velocity_gradient(self, t, x):
        """d_j u_i as (..., 2, 2)."""
        x = np.asarray(x, dtype=float)
        rho = self._rho(x)
        c1 = self._tfac(t) * (self.a - 1.0) * self._pow(rho, self.a - 3.0)
        c2 = self._tfac(t) * self._pow(rho, self.a - 1.0)
        rot = np.stack([x[..., 1], -x[..., 0]], axis=-1)
        eye_rot = np.array([[0.0, 1.0], [-1.0, 0.0]])
        return (c1[..., None, None] * rot[..., :, None] * x[..., None, :]
                + c2[..., None, None] * eye_rot)

    def strain(self, t, x):
        """Symmetric gradient as the component triple (D11, D22, D12)."""
        x = np.asarray(x, dtype=float)
        c = self._tfac(t) * (self.a - 1.0) * self._pow(self._rho(x),
                                                       self.a - 3.0)
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([c * x1 * x2, -c * x1 * x2,
                         0.5 * c * (x2 ** 2 - x1 ** 2)], axis=-1)

    def stress(self, t, x):
        return carreau_stress(self.strain(t, x), self.nu, self.eps, self.r)

    def _psi(self, t, rho):
        """Radial stress profile: S = psi(rho) [[x1 x2, .], [., -x1 x2]]."""
        T = self._tfac(t)
        w = self.eps ** 2 + 0.5 * (self.a - 1.0) ** 2 * T ** 2 \
            * self._pow(rho, 2.0 * self.a - 2.0)
        psi = 2.0 * self.nu * T * (self.a - 1.0) \
            * self._pow(rho, self.a - 3.0) * w ** ((self.r - 2.0) / 2.0)
        dw = (self.a - 1.0) ** 3 * T ** 2 * self._pow(rho, 2.0 * self.a - 3.0)
        dpsi = 2.0 * self.nu * T * (self.a - 1.0) * (
            (self.a - 3.0) * self._pow(rho, self.a - 4.0)
            * w ** ((self.r - 2.0) / 2.0)
            + self._pow(rho, self.a - 3.0) * 0.5 * (self.r - 2.0)
            * w ** ((self.r - 4.0) / 2.0) * dw)
        return psi, dpsi

    def stress_divergence(self, t, x):
        x = np.asarray(x, dtype=float)
        rho = self._rho(x)
        psi, dpsi = self._psi(t, rho)
        coef = 0.5 * rho * dpsi + 2.0 * psi
        return np.stack([coef * x[..., 1], -coef * x[..., 0]], axis=-1)

    def convection(self, t, x):
        """(u . grad) u = -T^2 |x|^(2a-2) x."""
        x = np.asarray(x, dtype=float)
        amp = -self._tfac(t) ** 2 * self._pow(self._rho(x), 2.0 * self.a - 2.0)
        return amp[..., None] * x

    def pressure_gradient(self, t, x):
        x = np.asarray(x, dtype=float)
        amp = self._tfac(t) ** 2 * self.b * self._pow(self._rho(x),
                                                      self.b - 2.0)
        return amp[..., None] * x

    def time_derivative(self, x):
        x = np.asarray(x, dtype=float)
        amp = self._pow(self._rho(x), self.a - 1.0)
        return np.stack([amp * x[..., 1], -amp * x[..., 0]], axis=-1)

    def penalty_term(self, t, x, inv_l):
        """(1/l) |u|^(2r'-2) u of the exact solution."""
        rp = self.r / (self.r - 1.0)
        u = self.velocity(t, x)
        mag = np.sqrt(u[..., 0] ** 2 + u[..., 1] ** 2)
        return inv_l * (mag ** (2.0 * rp - 2.0))[..., None] * u

    def forcing(self, t, x, convection=False, inv_l=0.0):
        f = -self.stress_divergence(t, x) + self.pressure_gradient(t, x)
        if self.unsteady:
            f = f + self.time_derivative(x)
        if convection:
            f = f + self.convection(t, x)
        if inv_l:
            f = f + self.penalty_term(t, x, inv_l)
        return f


def manufactured_forcing(sol, mode, inv_l=0.0):
    """Pointwise forcing f(t, x) for one of the benchmark modes."""
    if mode == "steady-noconv":
        return lambda t, x: sol.forcing(t, x, convection=False, inv_l=inv_l)
    if mode == "steady-conv":
        return lambda t, x: sol.forcing(t, x, convection=True, inv_l=inv_l)
    if mode == "unsteady-full":
        if not sol.unsteady:
            raise ValueError("unsteady-full needs an unsteady solution")
        return lambda t, x: sol.forcing(t, x, convection=True, inv_l=inv_l)
    raise ValueError(f"unknown forcing mode {mode!r}")


# -- norms and distances -------------------------------------------------------

def natural_transform(b, r, eps):
    """F(B) = (eps + |B|)^((r-2)/2) B on component triples."""
    b = np.asarray(b, dtype=float)
    mag = frob_norm(b)
    return ((eps + mag) ** ((r - 2.0) / 2.0))[..., None] * b


def natural_distance(u_h, exact_strain, r, eps, groups=None, degree=8,
                     singular_point=None):
    """L2 distance of F(D(u_exact)) and F(D(u_h)) over the mesh.

    exact_strain(x) returns component triples at points x.
    """
    if groups is None:
        groups = mesh_quadrature(u_h.space.mesh, degree, singular_point)
    total = 0.0
    for grp in groups:
        d_h = strain_from_gradient(grp.gradients(u_h.space, u_h.coeffs))
        diff = natural_transform(exact_strain(grp.points), r, eps) \
            - natural_transform(d_h, r, eps)
        total += float(np.sum(grp.wdet * frob_inner(diff, diff)))
    return np.sqrt(max(total, 0.0))


def lebesgue_norm(func, mesh, s, groups=None, degree=8, singular_point=None):
    """L^s norm of a pointwise function (scalar or vector values)."""
    if groups is None:
        groups = mesh_quadrature(mesh, degree, singular_point)
    total = 0.0
    for grp in groups:
        v = np.asarray(func(grp.points), dtype=float)
        mag = np.abs(v) if v.ndim == grp.wdet.ndim \
            else np.linalg.norm(v, axis=-1)
        total += float(np.sum(grp.wdet * mag ** s))
    return total ** (1.0 / s)


def field_error_lp(field, exact, s, groups=None, degree=8,
                   singular_point=None, mean_adjust=False, t=None):
    """||exact - field||_{L^s}; exact(x) matches the field's value shape.

    mean_adjust subtracts the mean of the difference first (pressure errors
    for fields defined up to a constant).
    """
    space = field.space
    if groups is None:
        groups = mesh_quadrature(space.mesh, degree, singular_point)
    shift = 0.0
    if mean_adjust:
        num = den = 0.0
        for grp in groups:
            diff = np.asarray(exact(grp.points), dtype=float) \
                - grp.values(space, field.coeffs)[..., 0]
            num += float(np.sum(grp.wdet * diff))
            den += float(np.sum(grp.wdet))
        shift = num / den
    total = 0.0
    for grp in groups:
        vals = grp.values(space, field.coeffs)
        ex = np.asarray(exact(grp.points), dtype=float)
        if space.ncomp == 1:
            mag = np.abs(ex - vals[..., 0] - shift)
        elif space.ncomp == 2:
            mag = np.linalg.norm(ex - vals, axis=-1)
        else:
            d = ex - vals
            mag = np.sqrt(np.maximum(frob_inner(d, d), 0.0))
        total += float(np.sum(grp.wdet * mag ** s))
    return total ** (1.0 / s)


def velocity_error_w1r(field, exact_vel, exact_grad, r, groups=None,
                       degree=8, singular_point=None):
    """Full W^(1,r) error: (int |u - u_h|^r + |grad(u - u_h)|^r)^(1/r)."""
    space = field.space
    if groups is None:
        groups = mesh_quadrature(space.mesh, degree, singular_point)
    total = 0.0
    for grp in groups:
        dv = np.asarray(exact_vel(grp.points), dtype=float) \
            - grp.values(space, field.coeffs)
        dg = np.asarray(exact_grad(grp.points), dtype=float) \
            - grp.gradients(space, field.coeffs)
        total += float(np.sum(grp.wdet * np.linalg.norm(dv, axis=-1) ** r))
        gmag = np.sqrt(np.sum(dg ** 2, axis=(-2, -1)))
        total += float(np.sum(grp.wdet * gmag ** r))
    return total ** (1.0 / r)


def field_lp_norm(field, s, groups=None, degree=8):
    """L^s norm of a discrete field (Frobenius magnitude for tensors)."""
    space = field.space
    if groups is None:
        groups = mesh_quadrature(space.mesh, degree)
    total = 0.0
    for grp in groups:
        vals = grp.values(space, field.coeffs)
        if space.ncomp == 1:
            mag = np.abs(vals[..., 0])
        elif space.ncomp == 2:
            mag = np.linalg.norm(vals, axis=-1)
        else:
            mag = np.sqrt(np.maximum(frob_inner(vals, vals), 0.0))
        total += float(np.sum(grp.wdet * mag ** s))
    return total ** (1.0 / s)


def divergence_l2(field, groups=None, degree=8):
    space = field.space
    if groups is None:
        groups = mesh_quadrature(space.mesh, degree)
    total = 0.0
    for grp in groups:
        g = grp.gradients(space, field.coeffs)
        div = g[..., 0, 0] + g[..., 1, 1]
        total += float(np.sum(grp.wdet * div ** 2))
    return np.sqrt(max(total, 0.0))


def eoc(errors, hs):
    """Experimental orders log(e_{i-1}/e_i) / log(h_{i-1}/h_i).

    Entry 0 is None; a zero error makes the adjacent rates None ("exact").
    """
    errors = list(errors)
    hs = list(hs)
    if len(errors) != len(hs) or len(errors) < 2:
        raise ValueError("need equally long lists with at least two entries")
    if any(hs[i] <= hs[i + 1] for i in range(len(hs) - 1)):
        raise ValueError("hs must decrease strictly")
    rates = [None]
    for i in range(1, len(errors)):
        if errors[i] == 0.0 or errors[i - 1] == 0.0:
            rates.append(None)
        else:
            rates.append(float(np.log(errors[i - 1] / errors[i])
                               / np.log(hs[i - 1] / hs[i])))
    return rates


# -- flow rate ----------------------------------------------------------------

_GL5_NODES, _GL5_WEIGHTS = np.polynomial.legendre.leggauss(5)


def flow_rate(u_field, x1):
    """Volumetric flow rate int_0^1 u_1(x1, y) dy.

    The vertical section is clipped against every cell and integrated with
    5-point Gauss per segment (exact for the piecewise-polynomial velocity).
    The section is nudged by 1e-9 so it never sits exactly on a mesh line.
    """
    if not 0.0 < x1 < 1.0:
        raise ValueError("x1 must lie inside (0, 1)")
    c = x1 + 1e-9
    space = u_field.space
    mesh = space.mesh
    v = mesh.vertices[mesh.cells]          # (nc, 3, 2)

    lo = np.zeros(mesh.num_cells)
    hi = np.ones(mesh.num_cells)
    feasible = np.ones(mesh.num_cells, dtype=bool)
    for k in range(3):
        a, b = v[:, k], v[:, (k + 1) % 3]
        beta = b[:, 0] - a[:, 0]
        alpha = -(b[:, 0] - a[:, 0]) * a[:, 1] - (b[:, 1] - a[:, 1]) \
            * (c - a[:, 0])
        pos, neg, zero = beta > 1e-15, beta < -1e-15, np.abs(beta) <= 1e-15
        bound = np.where(np.abs(beta) > 1e-15, -alpha / np.where(zero, 1.0, beta), 0.0)
        lo = np.where(pos, np.maximum(lo, bound), lo)
        hi = np.where(neg, np.minimum(hi, bound), hi)
        feasible &= ~(zero & (alpha < 0.0))
    feasible &= hi - lo > 1e-13
    cells = np.flatnonzero(feasible)
    if len(cells) == 0:
        return 0.0

    ylo, yhi = lo[cells], hi[cells]
    mid = 0.5 * (ylo + yhi)
    half = 0.5 * (yhi - ylo)
    ys = mid[:, None] + half[:, None] * _GL5_NODES[None, :]   # (k, 5)
    pts = np.stack([np.full_like(ys, c), ys], axis=-1)

    v0 = mesh.vertices[mesh.cells[cells, 0]]
    inv = mesh.inv_jacobians[cells]
    ref = np.einsum("kij,kqj->kqi", inv, pts - v0[:, None, :])

    vals, _ = space.tabulate(ref.reshape(-1, 2))
    vals = vals.reshape(len(cells), 5, -1)
    coeffs = u_field.coeffs[space.cell_dofs[cells]].reshape(
        len(cells), space.num_local_nodes, space.ncomp)
    u1 = np.einsum("kqm,km->kq", vals, coeffs[..., 0])
    return float(np.sum(half[:, None] * _GL5_WEIGHTS[None, :] * u1))


# -- inf-sup probes -------------------------------------------------------------

def _dense_gram(space, groups, h1=False, constrained=None):
    n = space.dim
    M = np.zeros((n, n))
    for grp in groups:
        phi, gphi = grp.tables(space)
        mloc = np.einsum("cq,qm,qn->cmn", grp.wdet, phi, phi)
        if h1:
            mloc = mloc + np.einsum("cq,cqmi,cqni->cmn", grp.wdet, gphi, gphi)
        edof = space.cell_dofs[grp.cells]
        if space.ncomp == 1:
            big = mloc
        else:
            # components decouple in the Gram matrix
            cdim = space.ncomp
            nl = mloc.shape[1]
            big = np.zeros((mloc.shape[0], nl * cdim, nl * cdim))
            for comp in range(cdim):
                big[:, comp::cdim, comp::cdim] = mloc
        for k in range(len(grp.cells)):
            M[np.ix_(edof[k], edof[k])] += big[k]
    if constrained is not None:
        keep = np.setdiff1d(np.arange(n), constrained)
        return M[np.ix_(keep, keep)], keep
    return M, np.arange(n)


def infsup_probe(velocity_space, pressure_space, s=2, max_dim=6000):
    """Inf-sup constant of the div coupling over zero-trace velocities.

    Returns beta = sqrt of the second-smallest generalized eigenvalue of
    B M^-1 B^T q = beta^2 N q (the smallest belongs to constant pressures).
    s=2 only; refuses large meshes (diagnostic tool, dense eigensolve).
    """
    if s != 2:
        raise ValueError("the probe covers the Hilbert setting s=2 only")
    if velocity_space.dim > max_dim:
        raise ValueError("mesh too large for the dense inf-sup probe")
    mesh = velocity_space.mesh
    groups = mesh_quadrature(mesh, 2 * velocity_space.degree + 1)

    bdofs = velocity_space.dofs_of_nodes(velocity_space.boundary_nodes(None))
    M, keep = _dense_gram(velocity_space, groups, h1=True, constrained=bdofs)
    Np, _ = _dense_gram(pressure_space, groups, h1=False)

    B = np.zeros((pressure_space.dim, velocity_space.dim))
    for grp in groups:
        phiP, _ = grp.tables(pressure_space)
        _, gphiU = grp.tables(velocity_space)
        bloc = np.einsum("cq,qm,cqni->cmni", grp.wdet, phiP,
                         gphiU).reshape(len(grp.cells), phiP.shape[1], -1)
        eP = pressure_space.cell_dofs[grp.cells]
        eU = velocity_space.cell_dofs[grp.cells]
        for k in range(len(grp.cells)):
            B[np.ix_(eP[k], eU[k])] += bloc[k]
    B = B[:, keep]

    A = B @ np.linalg.solve(M, B.T)
    eigs = scipy.linalg.eigh(A, Np, eigvals_only=True)
    eigs = np.sort(np.maximum(eigs, 0.0))
    # smallest nonzero mode: constant pressures (and, for unstable pairs,
    # exactly rank-deficient spurious modes) sit at zero
    cut = 1e-10 * max(eigs[-1], 1e-300)
    nonzero = eigs[eigs > cut]
    return float(np.sqrt(nonzero[0])) if len(nonzero) else 0.0


def infsup_stress_probe(stress_space, velocity_space, pressure_space,
                        max_dim=6000):
    """Stress-velocity inf-sup over discretely divergence-free velocities."""
    if velocity_space.dim > max_dim:
        raise ValueError("mesh too large for the dense inf-sup probe")
    mesh = velocity_space.mesh
    groups = mesh_quadrature(mesh, 2 * velocity_space.degree + 1)

    bdofs = velocity_space.dofs_of_nodes(velocity_space.boundary_nodes(None))
    M, keep = _dense_gram(velocity_space, groups, h1=True, constrained=bdofs)
    NS, _ = _dense_gram_sym(stress_space, groups)

    B = np.zeros((pressure_space.dim, velocity_space.dim))
    C = np.zeros((stress_space.dim, velocity_space.dim))
    for grp in groups:
        phiP, _ = grp.tables(pressure_space)
        phiS, _ = grp.tables(stress_space)
        _, gphiU = grp.tables(velocity_space)
        bloc = np.einsum("cq,qm,cqni->cmni", grp.wdet, phiP,
                         gphiU).reshape(len(grp.cells), phiP.shape[1], -1)
        nlS = phiS.shape[1]
        nlU = gphiU.shape[2]
        cl = np.zeros((len(grp.cells), nlS, 3, nlU, 2))
        g0 = np.einsum("cq,qm,cqni->cmni", grp.wdet, phiS, gphiU)
        cl[:, :, 0, :, 0] = g0[..., 0]
        cl[:, :, 1, :, 1] = g0[..., 1]
        cl[:, :, 2, :, 0] = g0[..., 1]
        cl[:, :, 2, :, 1] = g0[..., 0]
        cl = cl.reshape(len(grp.cells), nlS * 3, nlU * 2)
        eP = pressure_space.cell_dofs[grp.cells]
        eS = stress_space.cell_dofs[grp.cells]
        eU = velocity_space.cell_dofs[grp.cells]
        for k in range(len(grp.cells)):
            B[np.ix_(eP[k], eU[k])] += bloc[k]
            C[np.ix_(eS[k], eU[k])] += cl[k]
    B = B[:, keep]
    C = C[:, keep]

    Z = scipy.linalg.null_space(B)
    G = C @ Z
    A = G.T @ np.linalg.solve(NS, G)
    Mz = Z.T @ M @ Z
    eigs = scipy.linalg.eigh(A, Mz, eigvals_only=True)
    return float(np.sqrt(max(eigs[0], 0.0)))


def _dense_gram_sym(space, groups):
    """L2 Gram of a sym-tensor space under the Frobenius pairing."""
    n = space.dim
    M = np.zeros((n, n))
    for grp in groups:
        phi, _ = grp.tables(space)
        mloc = np.einsum("cq,qm,qn->cmn", grp.wdet, phi, phi)
        nl = mloc.shape[1]
        big = np.zeros((mloc.shape[0], nl * 3, nl * 3))
        for comp, wgt in enumerate(FROB_WEIGHTS):
            big[:, comp::3, comp::3] = wgt * mloc
        edof = space.cell_dofs[grp.cells]
        for k in range(len(grp.cells)):
            M[np.ix_(edof[k], edof[k])] += big[k]
    return M, np.arange(n)


# -- error tables ---------------------------------------------------------------

@dataclass
class ErrorTable:
    """Rows of (h [, tau], errors per norm) with EOC columns per norm."""
    norms: list
    hs: list
    taus: Optional[list] = None
    errors: Optional[dict] = None
    expected: Optional[dict] = None

    def __post_init__(self):
        if self.errors is None:
            self.errors = {name: [] for name in self.norms}

    def add_row(self, h, errs, tau=None):
        self.hs.append(h)
        if tau is not None:
            if self.taus is None:
                self.taus = []
            self.taus.append(tau)
        for name in self.norms:
            self.errors[name].append(errs[name])

    def rates(self):
        if len(self.hs) < 2:
            return {name: [None] * len(self.hs) for name in self.norms}
        return {name: eoc(self.errors[name], self.hs) for name in self.norms}
