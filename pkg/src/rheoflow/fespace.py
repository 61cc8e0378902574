"""Lagrange finite element spaces on triangle meshes.

Families: continuous ("CG", degree 1 or 2) and discontinuous ("DG", degree 0
or 1). Value shapes: scalar, 2-vectors, and symmetric 2x2 tensors stored as
the component triple (t11, t22, t12). Degrees of freedom are ordered
vertices first, then edges (edges sorted lexicographically by vertex pair),
with the components of a node contiguous.
"""

from __future__ import annotations

import numpy as np

from .quadrature import triangle_rule

SHAPES = {"scalar": 1, "vector": 2, "symtensor": 3}


def quadrature_rule(exactness_degree):
    """Triangle rule exact to the requested total degree (1..20)."""
    return triangle_rule(exactness_degree)


class InterpolationError(ValueError):
    """Non-finite value met while interpolating; carries the node location."""

    def __init__(self, message, location):
        super().__init__(message)
        self.location = np.asarray(location, dtype=float)


def _p1_tabulate(points):
    xi, eta = points[:, 0], points[:, 1]
    lam = np.stack([1.0 - xi - eta, xi, eta], axis=1)
    grad = np.broadcast_to(
        np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
        (len(points), 3, 2)).copy()
    return lam, grad


def _p2_tabulate(points):
    xi, eta = points[:, 0], points[:, 1]
    l0, l1, l2 = 1.0 - xi - eta, xi, eta
    g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    lam = np.stack([l0, l1, l2], axis=1)
    vals = np.empty((len(points), 6))
    grads = np.empty((len(points), 6, 2))
    for i in range(3):
        vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        grads[:, i] = (4.0 * lam[:, i, None] - 1.0) * g[i]
    # edge bubbles: local edge e is opposite vertex e
    for e, (i, j) in enumerate([(1, 2), (0, 2), (0, 1)]):
        vals[:, 3 + e] = 4.0 * lam[:, i] * lam[:, j]
        grads[:, 3 + e] = 4.0 * (lam[:, i, None] * g[j] + lam[:, j, None] * g[i])
    return vals, grads


def _p0_tabulate(points):
    return np.ones((len(points), 1)), np.zeros((len(points), 1, 2))


_TABULATORS = {("CG", 1): _p1_tabulate, ("CG", 2): _p2_tabulate,
               ("DG", 0): _p0_tabulate, ("DG", 1): _p1_tabulate}

_REF_NODES = {
    ("CG", 1): np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    ("DG", 1): np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    ("CG", 2): np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0],
                         [0.5, 0.5], [0.0, 0.5], [0.5, 0.0]]),
    ("DG", 0): np.array([[1 / 3, 1 / 3]]),
}


def _edge_table(mesh):
    """Unique mesh edges sorted lexicographically, plus cell->edge map."""
    c = mesh.cells
    pairs = np.sort(np.stack([c[:, [1, 2]], c[:, [0, 2]], c[:, [0, 1]]],
                             axis=1).reshape(-1, 2), axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


class FunctionSpace:
    """A (dis)continuous Lagrange space for scalar/vector/sym-tensor fields."""

    def __init__(self, mesh, family, degree, shape="scalar"):
        if family not in ("CG", "DG"):
            raise ValueError(f"unknown family {family!r}")
        if family == "CG" and not 1 <= degree <= 2:
            raise ValueError("continuous Lagrange supports degree 1 or 2")
        if family == "DG" and not 0 <= degree <= 1:
            raise ValueError("discontinuous Lagrange supports degree 0 or 1")
        if shape not in SHAPES:
            raise ValueError(f"unknown shape {shape!r}")

        self.mesh = mesh
        self.family = family
        self.degree = degree
        self.shape = shape
        self.ncomp = SHAPES[shape]

        nc = mesh.num_cells
        if family == "DG":
            nloc = 1 if degree == 0 else 3
            self.cell_nodes = np.arange(nc * nloc).reshape(nc, nloc)
            if degree == 0:
                self.node_coords = mesh.barycenters()
            else:
                self.node_coords = mesh.vertices[mesh.cells].reshape(-1, 2)
            self.edges = None
        else:
            if degree == 1:
                self.cell_nodes = mesh.cells.copy()
                self.node_coords = mesh.vertices.copy()
                self.edges = None
            else:
                edges, cell_edges = _edge_table(mesh)
                self.edges = edges
                self.cell_nodes = np.hstack(
                    [mesh.cells, mesh.num_vertices + cell_edges])
                mids = 0.5 * (mesh.vertices[edges[:, 0]]
                              + mesh.vertices[edges[:, 1]])
                self.node_coords = np.vstack([mesh.vertices, mids])

        self.num_nodes = self.node_coords.shape[0]
        self.num_local_nodes = self.cell_nodes.shape[1]
        self.dim = self.num_nodes * self.ncomp
        # global dof = node * ncomp + component; local dofs likewise blocked
        nl, nco = self.num_local_nodes, self.ncomp
        self.cell_dofs = (self.cell_nodes[:, :, None] * nco
                          + np.arange(nco)).reshape(nc, nl * nco)

    def tabulate(self, points):
        """Scalar basis values and reference gradients at reference points."""
        points = np.asarray(points, dtype=float)
        return _TABULATORS[(self.family, self.degree)](points)

    def reference_nodes(self):
        return _REF_NODES[(self.family, self.degree)].copy()

    def boundary_nodes(self, markers=None):
        """Node indices on boundary facets with the given markers."""
        if self.family != "CG":
            raise ValueError("boundary nodes are defined for CG spaces only")
        mesh = self.mesh
        if markers is None:
            sel = np.ones(len(mesh.facets), dtype=bool)
        else:
            sel = np.isin(mesh.facet_markers, np.asarray(list(markers)))
        facets = mesh.facets[sel]
        nodes = [np.unique(facets)]
        if self.degree == 2 and len(facets):
            pairs = np.sort(facets, axis=1)
            # locate facet edges in the lexicographic edge table
            key = np.int64(self.mesh.num_vertices + 1)
            idx = np.searchsorted(
                self.edges[:, 0] * key + self.edges[:, 1],
                pairs[:, 0] * key + pairs[:, 1])
            nodes.append(self.mesh.num_vertices + idx)
        return np.unique(np.concatenate(nodes))

    def dofs_of_nodes(self, nodes, component=None):
        nodes = np.asarray(nodes, dtype=np.int64)
        if component is None:
            return (nodes[:, None] * self.ncomp
                    + np.arange(self.ncomp)).ravel()
        return nodes * self.ncomp + component


class DiscreteField:
    """Coefficient vector paired with its function space."""

    def __init__(self, space, coeffs=None):
        self.space = space
        if coeffs is None:
            coeffs = np.zeros(space.dim)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.dim,):
            raise ValueError("coefficient length does not match space dimension")
        self.coeffs = coeffs

    def copy(self):
        return DiscreteField(self.space, self.coeffs.copy())

    def node_values(self):
        return self.coeffs.reshape(self.space.num_nodes, self.space.ncomp)


def build_space(mesh, family, degree, shape="scalar"):
    return FunctionSpace(mesh, family, degree, shape)


def interpolate(space, func):
    """Nodal interpolation of a pointwise function.

    `func` takes an (n, 2) point array and returns (n,) or (n, ncomp) values.
    Raises InterpolationError (with the node location) on non-finite values.
    """
    vals = np.asarray(func(space.node_coords), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (space.num_nodes, space.ncomp):
        raise ValueError(f"interpolant returned shape {vals.shape}, "
                         f"expected {(space.num_nodes, space.ncomp)}")
    bad = ~np.isfinite(vals)
    if bad.any():
        node = int(np.argwhere(bad)[0, 0])
        raise InterpolationError(
            f"non-finite value at node {node}", space.node_coords[node])
    return DiscreteField(space, vals.ravel())


def evaluate(field, cell, ref_point):
    """Value and physical gradient of a field at a reference point of a cell.

    Returns (value, gradient) with shapes (ncomp,) and (ncomp, 2).
    """
    ref_point = np.asarray(ref_point, dtype=float)
    xi, eta = ref_point
    if xi < -1e-12 or eta < -1e-12 or xi + eta > 1.0 + 1e-12:
        raise ValueError("reference point outside the reference simplex")
    space = field.space
    vals, grads = space.tabulate(ref_point[None, :])
    coeffs = field.coeffs[space.cell_dofs[cell]].reshape(
        space.num_local_nodes, space.ncomp)
    value = vals[0] @ coeffs
    grad_ref = np.einsum("md,mc->cd", grads[0], coeffs)
    grad = grad_ref @ field.space.mesh.inv_jacobians[cell]
    return value, grad


def element_pair_spaces(mesh, pair, k=1):
    """(stress, velocity, pressure) spaces for a named element pair.

    scott-vogelius: P2 velocity / P1 discontinuous pressure (use a
    barycentric-refined mesh); taylor-hood: P2 velocity / P1 continuous
    pressure; p1p1: the deliberately unstable equal-order pair used as the
    inf-sup negative control. Stress is always P_k discontinuous symmetric,
    k=1.
    """
    if k != 1:
        raise ValueError("only k=1 (P2 velocity, P1 stress) is supported")
    stress = FunctionSpace(mesh, "DG", 1, "symtensor")
    if pair == "scott-vogelius":
        vel = FunctionSpace(mesh, "CG", 2, "vector")
        pres = FunctionSpace(mesh, "DG", 1, "scalar")
    elif pair == "taylor-hood":
        vel = FunctionSpace(mesh, "CG", 2, "vector")
        pres = FunctionSpace(mesh, "CG", 1, "scalar")
    elif pair == "p1p1":
        vel = FunctionSpace(mesh, "CG", 1, "vector")
        pres = FunctionSpace(mesh, "CG", 1, "scalar")
    else:
        raise ValueError(f"unknown element pair {pair!r}")
    return stress, vel, pres
