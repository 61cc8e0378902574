"""Residual and Jacobian assembly for the discrete three-field system.

Unknown layout is x = [S | u | p]. The residual blocks are

  tau-block : int G(S, D(u)) : tau                  for all stress tests tau
  v-block   : (1/tau_m) int (u - u_prev).v + (1/l) int |u|^(2r'-2) u.v
              + int S : D(v) + B(u, u, v) - int p div v - <f, v>
  q-block   : -int q div u

with Dirichlet velocity rows replaced by (u - g). The Jacobian is the exact
Frechet derivative (rows replaced by identity, columns kept). Because the
stress space is discontinuous, its diagonal block is cell-local and the
linear solve statically condenses it onto a (u, p) system.

Assembly is vectorized over cells, grouped by quadrature rule; cells touching
a declared singular point get a graded composite rule. Contributions are
reduced with bincount in fixed cell order, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import FROB_WEIGHTS, eval_residual, eval_tangents
from .fespace import DiscreteField, FunctionSpace
from .quadrature import graded_vertex_rule, triangle_rule


# -- quadrature over cell groups --------------------------------------------

class CellQuadrature:
    """Geometry and tabulated bases for a subset of cells under one rule."""

    def __init__(self, mesh, cells, rule):
        self.mesh = mesh
        self.cells = np.asarray(cells, dtype=np.int64)
        self.rule = rule
        jac = mesh.jacobians[self.cells]
        v0 = mesh.vertices[mesh.cells[self.cells, 0]]
        self.points = np.einsum("cid,qd->cqi", jac, rule.points) + v0[:, None, :]
        self.wdet = rule.weights[None, :] * mesh.jac_dets[self.cells, None]
        self._inv_jac_t = mesh.inv_jac_t[self.cells]
        self._tables = {}

    def tables(self, space):
        """(phi, grad_phi) with grad in physical coordinates, (c, q, m, 2)."""
        key = (space.family, space.degree)
        if key not in self._tables:
            phi, gref = space.tabulate(self.rule.points)
            gphi = np.einsum("cij,qmj->cqmi", self._inv_jac_t, gref)
            self._tables[key] = (phi, gphi)
        return self._tables[key]

    def values(self, space, coeffs):
        """Field values at quadrature points, (c, q, ncomp)."""
        phi, _ = self.tables(space)
        cell_coeffs = coeffs[space.cell_dofs[self.cells]].reshape(
            len(self.cells), space.num_local_nodes, space.ncomp)
        return np.matmul(phi[None], cell_coeffs)

    def gradients(self, space, coeffs):
        """Field gradients d_j f_k at quadrature points, (c, q, ncomp, 2)."""
        _, gphi = self.tables(space)
        c = len(self.cells)
        nq, nl = gphi.shape[1], gphi.shape[2]
        cell_coeffs = coeffs[space.cell_dofs[self.cells]].reshape(
            c, nl, space.ncomp)
        flat = gphi.transpose(0, 1, 3, 2).reshape(c, nq * 2, nl)
        out = np.matmul(flat, cell_coeffs)          # (c, q*2, ncomp)
        return out.reshape(c, nq, 2, space.ncomp).transpose(0, 1, 3, 2)


def mesh_quadrature(mesh, degree, singular_point=None, singular_degree=10,
                    levels=24):
    """Cell groups covering the mesh; graded rules near a singular point."""
    base = triangle_rule(degree)
    if singular_point is None:
        return [CellQuadrature(mesh, np.arange(mesh.num_cells), base)]
    p = np.asarray(singular_point, dtype=float)
    dist = np.linalg.norm(mesh.vertices[mesh.cells] - p, axis=2)  # (nc, 3)
    local = np.argmin(dist, axis=1)
    touching = dist[np.arange(mesh.num_cells), local] < 1e-12
    groups = []
    regular = np.flatnonzero(~touching)
    if len(regular):
        groups.append(CellQuadrature(mesh, regular, base))
    for lv in range(3):
        cells = np.flatnonzero(touching & (local == lv))
        if len(cells):
            rule = graded_vertex_rule(lv, degree=max(singular_degree, degree),
                                      levels=levels)
            groups.append(CellQuadrature(mesh, cells, rule))
    return groups


def strain_from_gradient(grad):
    """Symmetric-gradient component triple from d_j u_i arrays (..., 2, 2)."""
    return np.stack([grad[..., 0, 0], grad[..., 1, 1],
                     0.5 * (grad[..., 0, 1] + grad[..., 1, 0])], axis=-1)


def _phi_pair_tensor(w, phi, kmat):
    """sum_q (w phi_m)(phi_n) K[i, l] as (c, m, i, n, l) element blocks."""
    c, nq = w.shape
    nl = phi.shape[1]
    d1, d2 = kmat.shape[-2:]
    p = w[..., None] * phi[None]
    r = (phi[None, :, :, None, None] * kmat[:, :, None, :, :]).reshape(
        c, nq, nl * d1 * d2)
    out = np.matmul(p.transpose(0, 2, 1), r).reshape(c, nl, nl, d1, d2)
    return out.transpose(0, 1, 3, 2, 4)


# -- problem description -----------------------------------------------------

@dataclass
class DirichletBC:
    """Essential velocity data on a set of boundary markers.

    component None constrains the full vector; 0 or 1 constrains a single
    component (value then returns scalars).
    """
    markers: tuple
    value: Callable
    component: Optional[int] = None


@dataclass
class FormParams:
    tau: Optional[float] = None      # timestep; None = steady
    inv_l: float = 0.0               # penalty coefficient 1/l
    r: float = 2.0                   # growth exponent (sets r' in the penalty)
    convection: bool = False
    b_variant: str = "skew"          # "divfree" or "skew"
    forcing: Optional[Callable] = None

    @property
    def r_conj(self):
        return self.r / (self.r - 1.0)


@dataclass
class ThreeFieldState:
    S: DiscreteField
    u: DiscreteField
    p: DiscreteField
    bcs: Sequence[DirichletBC] = field(default_factory=list)
    time_index: int = 0

    def vector(self):
        return np.concatenate([self.S.coeffs, self.u.coeffs, self.p.coeffs])

    def with_vector(self, x):
        nS, nU = self.S.space.dim, self.u.space.dim
        return ThreeFieldState(
            DiscreteField(self.S.space, x[:nS].copy()),
            DiscreteField(self.u.space, x[nS:nS + nU].copy()),
            DiscreteField(self.p.space, x[nS + nU:].copy()),
            self.bcs, self.time_index)


def zero_state(stress_space, velocity_space, pressure_space, bcs=()):
    return ThreeFieldState(DiscreteField(stress_space),
                           DiscreteField(velocity_space),
                           DiscreteField(pressure_space), list(bcs))


def select_b_variant(element_pair):
    """Convective form choice: exactly divergence-free pairs use "divfree"."""
    return "divfree" if element_pair == "scott-vogelius" else "skew"


class ThreeFieldProblem:
    """Caches geometry/dof data and assembles residuals and Jacobians."""

    def __init__(self, stress_space, velocity_space, pressure_space, model,
                 params, bcs=(), quad_degree=7, singular_point=None,
                 nullspace=None):
        if not (stress_space.mesh is velocity_space.mesh is pressure_space.mesh):
            raise ValueError("spaces live on different meshes")
        self.S_space = stress_space
        self.u_space = velocity_space
        self.p_space = pressure_space
        self.mesh = velocity_space.mesh
        self.model = model
        self.params = params
        self.bcs = list(bcs)
        self.nS = stress_space.dim
        self.nU = velocity_space.dim
        self.nP = pressure_space.dim
        self.dim = self.nS + self.nU + self.nP

        self.groups = mesh_quadrature(self.mesh, quad_degree, singular_point)
        for grp in self.groups:
            grp.edofS = stress_space.cell_dofs[grp.cells]
            grp.edofU = velocity_space.cell_dofs[grp.cells]
            grp.edofP = pressure_space.cell_dofs[grp.cells]

        self._set_bc_layout()
        if nullspace is None:
            nullspace = self._pure_dirichlet()
        self.nullspace = nullspace

        w = np.zeros(self.nP)
        for grp in self.groups:
            phiP, _ = grp.tables(pressure_space)
            loc = np.einsum("cq,qm->cm", grp.wdet, phiP)
            np.add.at(w, grp.edofP, loc)
        self.pressure_weights = w
        self.domain_area = float(w.sum())

    # -- boundary conditions -------------------------------------------------

    def _set_bc_layout(self):
        dofs = []
        self._bc_pieces = []
        for bc in self.bcs:
            nodes = self.u_space.boundary_nodes(bc.markers)
            d = self.u_space.dofs_of_nodes(nodes, bc.component)
            dofs.append(d)
            self._bc_pieces.append((nodes, d))
        if dofs:
            self.bc_dofs = np.unique(np.concatenate(dofs))
        else:
            self.bc_dofs = np.zeros(0, dtype=np.int64)
        mask = np.zeros(self.nU, dtype=bool)
        mask[self.bc_dofs] = True
        self._bc_mask_u = mask
        for grp in self.groups:
            grp.bc_rows_u = mask[grp.edofU]   # (c, nloc_u) bool

    def bc_values(self):
        """Constrained velocity dofs and their current boundary values."""
        vals = np.zeros(self.nU)
        for bc, (nodes, d) in zip(self.bcs, self._bc_pieces):
            g = np.asarray(bc.value(self.u_space.node_coords[nodes]),
                           dtype=float)
            if bc.component is None:
                vals[d] = g.ravel()
            else:
                vals[d] = g
        return self.bc_dofs, vals[self.bc_dofs]

    def apply_bcs(self, x):
        """Overwrite constrained velocity dofs with boundary values."""
        dofs, vals = self.bc_values()
        x = x.copy()
        x[self.nS + dofs] = vals
        return x

    def _pure_dirichlet(self):
        if not self.bcs:
            return False
        full = np.zeros(self.u_space.num_nodes, dtype=bool)
        comps = np.zeros((self.u_space.num_nodes, 2), dtype=bool)
        for bc, (nodes, _) in zip(self.bcs, self._bc_pieces):
            if bc.component is None:
                full[nodes] = True
            else:
                comps[nodes, bc.component] = True
        bdry = self.u_space.boundary_nodes(None)
        return bool(np.all(full[bdry] | (comps[bdry, 0] & comps[bdry, 1])))

    # -- pointwise kernels -----------------------------------------------------

    def _momentum_pointwise(self, grp, u_q, grad_u, S_q, p_q, u_prev):
        """(value-paired vector, gradient-paired tensor) momentum integrands."""
        prm = self.params
        c, q = u_q.shape[:2]
        mom = np.zeros((c, q, 2))
        if prm.tau is not None:
            up = grp.values(self.u_space, u_prev) if u_prev is not None else 0.0
            mom += (u_q - up) / prm.tau
        if prm.inv_l:
            rp = prm.r_conj
            mag = np.sqrt(u_q[..., 0]**2 + u_q[..., 1]**2)
            mom += prm.inv_l * (mag ** (2.0 * rp - 2.0))[..., None] * u_q
        if prm.forcing is not None:
            mom -= np.asarray(prm.forcing(grp.points), dtype=float)

        amat = np.empty((c, q, 2, 2))
        amat[..., 0, 0] = S_q[..., 0] - p_q
        amat[..., 1, 1] = S_q[..., 1] - p_q
        amat[..., 0, 1] = S_q[..., 2]
        amat[..., 1, 0] = S_q[..., 2]
        if prm.convection:
            uout = u_q[..., :, None] * u_q[..., None, :]
            if prm.b_variant == "divfree":
                amat -= uout
            else:
                amat -= 0.5 * uout
                D = strain_from_gradient(grad_u)
                Dmat = np.empty_like(amat)
                Dmat[..., 0, 0] = D[..., 0]
                Dmat[..., 1, 1] = D[..., 1]
                Dmat[..., 0, 1] = D[..., 2]
                Dmat[..., 1, 0] = D[..., 2]
                mom += 0.5 * np.einsum("cqkl,cql->cqk", Dmat, u_q)
        return mom, amat

    # -- residual ---------------------------------------------------------------

    def residual(self, x, u_prev=None):
        """Assembled residual; Dirichlet rows replaced by (u - g)."""
        Sv = x[:self.nS]
        uv = x[self.nS:self.nS + self.nU]
        pv = x[self.nS + self.nU:]
        out = np.zeros(self.dim)

        for grp in self.groups:
            S_q = grp.values(self.S_space, Sv)
            u_q = grp.values(self.u_space, uv)
            grad_u = grp.gradients(self.u_space, uv)
            D_q = strain_from_gradient(grad_u)
            p_q = grp.values(self.p_space, pv)[..., 0]

            G_q = eval_residual(self.model, S_q, D_q, grp.points)
            phiS, _ = grp.tables(self.S_space)
            w = grp.wdet
            c, nq = w.shape
            RS = np.matmul(phiS.T[None],
                           w[..., None] * (G_q * FROB_WEIGHTS))

            mom, amat = self._momentum_pointwise(grp, u_q, grad_u, S_q, p_q,
                                                 u_prev)
            phiU, gphiU = grp.tables(self.u_space)
            nlU = phiU.shape[1]
            RU = np.matmul(phiU.T[None], w[..., None] * mom)
            wg = (w[..., None, None] * gphiU).transpose(0, 2, 1, 3) \
                .reshape(c, nlU, nq * 2)
            am = amat.transpose(0, 1, 3, 2).reshape(c, nq * 2, 2)
            RU = RU + np.matmul(wg, am)

            divu = grad_u[..., 0, 0] + grad_u[..., 1, 1]
            phiP, _ = grp.tables(self.p_space)
            RP = -np.matmul(phiP.T[None], (w * divu)[..., None])[..., 0]

            n = self.dim
            out += np.bincount(grp.edofS.ravel(), RS.reshape(len(grp.cells), -1).ravel(), minlength=n)
            out += np.bincount(self.nS + grp.edofU.ravel(), RU.reshape(len(grp.cells), -1).ravel(), minlength=n)
            out += np.bincount(self.nS + self.nU + grp.edofP.ravel(), RP.ravel(), minlength=n)

        dofs, vals = self.bc_values()
        out[self.nS + dofs] = uv[dofs] - vals
        return out

    # -- jacobian ---------------------------------------------------------------

    def _constant_blocks(self, grp):
        """State-independent element blocks, cached on the group."""
        if hasattr(grp, "_const"):
            return grp._const
        w = grp.wdet
        phiS, _ = grp.tables(self.S_space)
        phiU, gphiU = grp.tables(self.u_space)
        phiP, _ = grp.tables(self.p_space)
        c = len(grp.cells)
        nlS, nlU, nlP = phiS.shape[1], phiU.shape[1], phiP.shape[1]

        const = {}
        # A_US[(m i), (n b)]: stress basis tensor against grad of v
        AUS = np.zeros((c, nlU, 2, nlS, 3))
        g0 = np.einsum("cq,cqm,qn->cmn", w, gphiU[..., 0], phiS,
                       optimize=True)
        g1 = np.einsum("cq,cqm,qn->cmn", w, gphiU[..., 1], phiS,
                       optimize=True)
        AUS[:, :, 0, :, 0] = g0
        AUS[:, :, 1, :, 1] = g1
        AUS[:, :, 0, :, 2] = g1
        AUS[:, :, 1, :, 2] = g0
        const["AUS"] = AUS.reshape(c, 2 * nlU, 3 * nlS)
        const["AUP"] = -np.einsum("cq,cqmi,qn->cmin", w, gphiU, phiP,
                                  optimize=True).reshape(c, 2 * nlU, nlP)
        const["APU"] = -np.einsum("cq,qm,cqni->cmni", w, phiP, gphiU,
                                  optimize=True).reshape(c, nlP, 2 * nlU)
        const["MASS_U"] = np.einsum("cq,qm,qn->cmn", w, phiU, phiU,
                                    optimize=True)
        const["MASS_S"] = np.einsum("cq,qm,qn->cmn", w, phiS, phiS,
                                    optimize=True)
        if self.model.orientation == "stress":
            # dG/dS = identity: A_SS is the metric-weighted stress mass
            ASS = np.zeros((c, nlS, 3, nlS, 3))
            for a, wgt in enumerate(FROB_WEIGHTS):
                ASS[:, :, a, :, a] = wgt * const["MASS_S"]
            const["ASS"] = ASS.reshape(c, 3 * nlS, 3 * nlS)
            const["ASS_inv"] = np.linalg.inv(const["ASS"])
        grp._const = const
        return const

    def jacobian(self, x):
        Sv = x[:self.nS]
        uv = x[self.nS:self.nS + self.nU]
        blocks = []
        prm = self.params

        for grp in self.groups:
            const = self._constant_blocks(grp)
            u_q = grp.values(self.u_space, uv)
            grad_u = grp.gradients(self.u_space, uv)
            D_q = strain_from_gradient(grad_u)
            w = grp.wdet
            phiS, _ = grp.tables(self.S_space)
            phiU, gphiU = grp.tables(self.u_space)
            phiP, _ = grp.tables(self.p_space)
            c = len(grp.cells)
            nlS, nlU, nlP = phiS.shape[1], phiU.shape[1], phiP.shape[1]
            wS = w[..., None] * FROB_WEIGHTS          # (c, q, 3) test metric

            if self.model.orientation == "stress":
                S_q = None
                _, dGdD = eval_tangents(self.model, np.zeros_like(D_q), D_q,
                                        grp.points)
                ASS = const["ASS"]
                ASS_inv = const["ASS_inv"]
            else:
                S_q = grp.values(self.S_space, Sv)
                dGdS, dGdD = eval_tangents(self.model, S_q, D_q, grp.points)
                ASS = _phi_pair_tensor(w, phiS,
                                       FROB_WEIGHTS[:, None] * dGdS).reshape(
                    c, 3 * nlS, 3 * nlS)
                ASS_inv = None

            # H[a, n, i] = sum_b dG_a/dD_b D_b(phi_n e_i)
            nq = w.shape[1]
            H = np.zeros((c, nq, 3, nlU, 2))
            H[..., 0] = (dGdD[..., 0, None] * gphiU[..., None, :, 0]
                         + 0.5 * dGdD[..., 2, None] * gphiU[..., None, :, 1])
            H[..., 1] = (dGdD[..., 1, None] * gphiU[..., None, :, 1]
                         + 0.5 * dGdD[..., 2, None] * gphiU[..., None, :, 0])
            wH = (wS[..., None, None] * H).reshape(c, nq, 3 * nlU * 2)
            ASU = np.matmul(phiS.T[None], wH).reshape(
                c, nlS, 3, 2 * nlU).reshape(c, 3 * nlS, 2 * nlU)

            AUS = const["AUS"]

            # A_UU: time mass + penalty tangent + convection tangent
            AUU = np.zeros((c, nlU, 2, nlU, 2))
            eye_il = np.eye(2)[None, None, :, None, :]
            if prm.tau is not None:
                AUU += (const["MASS_U"][:, :, None, :, None] * eye_il) \
                    / prm.tau
            if prm.inv_l:
                rp = prm.r_conj
                mag = np.maximum(np.sqrt(u_q[..., 0]**2 + u_q[..., 1]**2),
                                 1e-300)
                K = (prm.inv_l * (2 * rp - 2) * mag**(2 * rp - 4))[..., None, None] \
                    * u_q[..., :, None] * u_q[..., None, :]
                K += (prm.inv_l * mag**(2 * rp - 2))[..., None, None] * np.eye(2)
                AUU += _phi_pair_tensor(w, phiU, K)
            if prm.convection:
                udotg = np.einsum("cqj,cqmj->cqm", u_q, gphiU)
                fac = 1.0 if prm.b_variant == "divfree" else 0.5
                t1 = np.matmul((w[..., None] * udotg).transpose(0, 2, 1),
                               np.broadcast_to(phiU, udotg.shape))
                AUU -= fac * t1[:, :, None, :, None] * eye_il
                # sum_q w phi_n u_i g_{m,l}: build as ((m,l), (n,i)) blocks
                P = (w[..., None, None] * gphiU).reshape(c, nq, nlU * 2)
                R = (phiU[None, :, :, None] * u_q[:, :, None, :]).reshape(
                    c, nq, nlU * 2)
                T2 = np.matmul(P.transpose(0, 2, 1), R).reshape(
                    c, nlU, 2, nlU, 2)
                AUU -= fac * T2.transpose(0, 1, 4, 3, 2)
                if prm.b_variant == "skew":
                    t2 = np.matmul((w[..., None] * phiU[None])
                                   .transpose(0, 2, 1), udotg)
                    AUU += 0.25 * t2[:, :, None, :, None] * eye_il
                    # sum_q w phi_m u_l g_{n,k}: ((m), (n,k,l)) blocks
                    pm = w[..., None] * phiU[None]
                    rn = (gphiU[:, :, :, :, None]
                          * u_q[:, :, None, None, :]).reshape(
                              c, nq, nlU * 4)
                    V2 = np.matmul(pm.transpose(0, 2, 1), rn).reshape(
                        c, nlU, nlU, 2, 2)
                    AUU += 0.25 * V2.transpose(0, 1, 3, 2, 4)
                    Dmat = np.empty((c, nq, 2, 2))
                    Dmat[..., 0, 0] = D_q[..., 0]
                    Dmat[..., 1, 1] = D_q[..., 1]
                    Dmat[..., 0, 1] = D_q[..., 2]
                    Dmat[..., 1, 0] = D_q[..., 2]
                    AUU += 0.5 * _phi_pair_tensor(w, phiU, Dmat)
            AUU = AUU.reshape(c, 2 * nlU, 2 * nlU)

            blocks.append({
                "grp": grp, "ASS": ASS, "ASS_inv": ASS_inv, "ASU": ASU,
                "AUS": AUS, "AUU": AUU, "AUP": const["AUP"],
                "APU": const["APU"],
            })
        return SystemMatrix(self, blocks)


# -- assembled jacobian -------------------------------------------------------

class LinearSolveError(RuntimeError):
    pass


class SystemMatrix:
    """Block Jacobian with Dirichlet row replacement.

    `tocsr` gives the full [S|u|p] matrix (used by consistency tests);
    `solve` statically condenses the cell-local stress block onto a (u, p)
    system, optionally bordered by the pressure-mean constraint, and
    factorizes it with SuperLU.
    """

    def __init__(self, problem, blocks):
        self.problem = problem
        self.blocks = blocks
        self._csr = None

    @property
    def shape(self):
        return (self.problem.dim, self.problem.dim)

    def tocsr(self):
        if self._csr is not None:
            return self._csr
        pb = self.problem
        rows, cols, vals = [], [], []

        def add(rdofs, cdofs, mat, mask_rows=None):
            if mask_rows is not None:
                mat = np.where(mask_rows[:, :, None], 0.0, mat)
            c, nr, nc = mat.shape
            rows.append(np.repeat(rdofs, nc, axis=1).ravel())
            cols.append(np.tile(cdofs, (1, nr)).ravel())
            vals.append(mat.ravel())

        for blk in self.blocks:
            grp = blk["grp"]
            eS = grp.edofS
            eU = pb.nS + grp.edofU
            eP = pb.nS + pb.nU + grp.edofP
            mask = grp.bc_rows_u
            add(eS, eS, blk["ASS"])
            add(eS, eU, blk["ASU"])
            add(eU, eS, blk["AUS"], mask)
            add(eU, eU, blk["AUU"], mask)
            add(eU, eP, blk["AUP"], mask)
            add(eP, eU, blk["APU"])

        bc = pb.nS + pb.bc_dofs
        rows.append(bc)
        cols.append(bc)
        vals.append(np.ones(len(bc)))
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=self.shape).tocsr()
        self._csr = mat
        return mat

    def matvec(self, v):
        return self.tocsr() @ v

    def solve(self, rhs):
        """Solve J dx = rhs via stress condensation and sparse LU."""
        pb = self.problem
        nS, nU, nP = pb.nS, pb.nU, pb.nP
        rU = rhs[nS:nS + nU].copy()
        rP = rhs[nS + nU:]

        schur_parts = []
        for blk in self.blocks:
            grp = blk["grp"]
            rS_cell = rhs[grp.edofS]
            try:
                if blk.get("ASS_inv") is not None:
                    blk["ASS_solve_SU"] = blk["ASS_inv"] @ blk["ASU"]
                    blk["ASS_solve_rS"] = np.einsum(
                        "cij,cj->ci", blk["ASS_inv"], rS_cell)
                else:
                    blk["ASS_solve_SU"] = np.linalg.solve(blk["ASS"],
                                                          blk["ASU"])
                    blk["ASS_solve_rS"] = np.linalg.solve(
                        blk["ASS"], rS_cell[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise LinearSolveError("singular stress block") from exc
            corr = np.einsum("cik,ck->ci", blk["AUS"], blk["ASS_solve_rS"])
            rU -= np.bincount(grp.edofU.ravel(), corr.ravel(), minlength=nU)
            schur_parts.append(blk["AUS"] @ blk["ASS_solve_SU"])

        dofs_bc = pb.bc_dofs
        rU[dofs_bc] = rhs[nS + dofs_bc]

        n_cond = nU + nP + (1 if pb.nullspace else 0)
        rows, cols, vals = [], [], []

        def add(rdofs, cdofs, mat, mask_rows=None):
            if mask_rows is not None:
                mat = np.where(mask_rows[:, :, None], 0.0, mat)
            c, nr, nc = mat.shape
            rows.append(np.repeat(rdofs, nc, axis=1).ravel())
            cols.append(np.tile(cdofs, (1, nr)).ravel())
            vals.append(mat.ravel())

        for blk, schur in zip(self.blocks, schur_parts):
            grp = blk["grp"]
            eU = grp.edofU
            eP = nU + grp.edofP
            mask = grp.bc_rows_u
            add(eU, eU, blk["AUU"] - schur, mask)
            add(eU, eP, blk["AUP"], mask)
            add(eP, eU, blk["APU"])

        rows.append(dofs_bc)
        cols.append(dofs_bc)
        vals.append(np.ones(len(dofs_bc)))

        rhs_c = np.concatenate([rU, rP])
        if pb.nullspace:
            wp = pb.pressure_weights
            pidx = nU + np.arange(nP)
            last = np.full(nP, nU + nP)
            rows.append(pidx)
            cols.append(last)
            vals.append(wp)
            rows.append(last)
            cols.append(pidx)
            vals.append(wp)
            rhs_c = np.concatenate([rhs_c, [0.0]])

        K = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows).astype(np.int64),
              np.concatenate(cols).astype(np.int64))),
            shape=(n_cond, n_cond)).tocsc()
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise LinearSolveError(str(exc)) from exc
        sol = lu.solve(rhs_c)
        if not np.all(np.isfinite(sol)):
            raise LinearSolveError("non-finite solution from sparse LU")
        du = sol[:nU]
        dp = sol[nU:nU + nP]

        dS = np.zeros(nS)
        for blk in self.blocks:
            grp = blk["grp"]
            du_cell = du[grp.edofU]
            rS_part = blk["ASS_solve_rS"] - np.einsum(
                "cij,cj->ci", blk["ASS_solve_SU"], du_cell)
            dS[grp.edofS.ravel()] = rS_part.ravel()
        return np.concatenate([dS, du, dp])


# -- spec-level wrappers ------------------------------------------------------

def assemble_residual(state, state_prev, model, params, **kwargs):
    problem = ThreeFieldProblem(state.S.space, state.u.space, state.p.space,
                                model, params, state.bcs, **kwargs)
    u_prev = state_prev.u.coeffs if state_prev is not None else None
    return problem.residual(state.vector(), u_prev)


def assemble_jacobian(state, model, params, **kwargs):
    problem = ThreeFieldProblem(state.S.space, state.u.space, state.p.space,
                                model, params, state.bcs, **kwargs)
    return problem.jacobian(state.vector())


def trilinear_b(u, v, w, variant, quad_degree=7):
    """Convective trilinear form B(u, v, w) for discrete fields.

    divfree: -int u (x) v : D(w);  skew: (1/2) int (u (x) w : D(v)
    - u (x) v : D(w)).
    """
    if variant not in ("divfree", "skew"):
        raise ValueError(f"unknown variant {variant!r}")
    mesh = u.space.mesh
    total = 0.0
    for grp in mesh_quadrature(mesh, quad_degree):
        uq = grp.values(u.space, u.coeffs)
        vq = grp.values(v.space, v.coeffs)
        gw = grp.gradients(w.space, w.coeffs)
        Dw = strain_from_gradient(gw)
        uv_dw = (uq[..., 0] * vq[..., 0] * Dw[..., 0]
                 + uq[..., 1] * vq[..., 1] * Dw[..., 1]
                 + (uq[..., 0] * vq[..., 1] + uq[..., 1] * vq[..., 0])
                 * Dw[..., 2])
        if variant == "divfree":
            total += float(np.sum(grp.wdet * -uv_dw))
        else:
            gv = grp.gradients(v.space, v.coeffs)
            Dv = strain_from_gradient(gv)
            wq = grp.values(w.space, w.coeffs)
            uw_dv = (uq[..., 0] * wq[..., 0] * Dv[..., 0]
                     + uq[..., 1] * wq[..., 1] * Dv[..., 1]
                     + (uq[..., 0] * wq[..., 1] + uq[..., 1] * wq[..., 0])
                     * Dv[..., 2])
            total += 0.5 * float(np.sum(grp.wdet * (uw_dv - uv_dw)))
    return total
