"""Conforming triangulations of rectangular domains.

Cells are stored counterclockwise; every cell carries an affine map
x = B xi + b from the reference simplex {xi >= 0, eta >= 0, xi + eta <= 1}.
Boundary edges are tagged by side: bottom=1, right=2, top=3, left=4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOTTOM, RIGHT, TOP, LEFT = 1, 2, 3, 4


@dataclass(frozen=True)
class AffineMap:
    """Affine map x = linear @ xi + offset from the reference simplex."""

    linear: np.ndarray   # (2, 2)
    offset: np.ndarray   # (2,)
    det: float

    def apply(self, ref_points):
        ref_points = np.asarray(ref_points, dtype=float)
        return ref_points @ self.linear.T + self.offset

    def invert(self, points):
        points = np.asarray(points, dtype=float)
        inv = np.linalg.inv(self.linear)
        return (points - self.offset) @ inv.T


class TriMesh:
    """Triangle mesh with boundary markers and cached affine-map data.

    Parameters
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array
        Vertex indices, counterclockwise.
    facets : (nf, 2) int array
        Boundary edges as vertex pairs.
    facet_markers : (nf,) int array
    level : int
        Refinement index (cells per side for the built-in generator).
    """

    def __init__(self, vertices, cells, facets, facet_markers, level=0):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.facets = np.ascontiguousarray(facets, dtype=np.int64)
        self.facet_markers = np.ascontiguousarray(facet_markers, dtype=np.int64)
        self.level = int(level)

        v = self.vertices
        c = self.cells
        e1 = v[c[:, 1]] - v[c[:, 0]]
        e2 = v[c[:, 2]] - v[c[:, 0]]
        # jacobian columns are the edge vectors from vertex 0
        self.jacobians = np.stack([e1, e2], axis=-1)           # (nc, 2, 2)
        self.jac_dets = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(self.jac_dets <= 0.0):
            bad = int(np.argmax(self.jac_dets <= 0.0))
            raise ValueError(f"cell {bad} is not counterclockwise (det <= 0)")
        inv = np.empty_like(self.jacobians)
        inv[:, 0, 0] = self.jacobians[:, 1, 1]
        inv[:, 0, 1] = -self.jacobians[:, 0, 1]
        inv[:, 1, 0] = -self.jacobians[:, 1, 0]
        inv[:, 1, 1] = self.jacobians[:, 0, 0]
        inv /= self.jac_dets[:, None, None]
        self.inv_jacobians = inv
        # transform of reference gradients: grad_x = inv_jac.T @ grad_xi
        self.inv_jac_t = np.ascontiguousarray(np.swapaxes(inv, 1, 2))
        self._check_conforming()

    # -- basic queries ----------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def affine_map(self, cell):
        return AffineMap(self.jacobians[cell].copy(),
                         self.vertices[self.cells[cell, 0]].copy(),
                         float(self.jac_dets[cell]))

    def cell_areas(self):
        return 0.5 * self.jac_dets

    def edge_lengths(self):
        """Lengths of the three edges of every cell, shape (nc, 3)."""
        v = self.vertices[self.cells]                          # (nc, 3, 2)
        d = v[:, [1, 2, 0], :] - v[:, [0, 1, 2], :]
        return np.linalg.norm(d, axis=2)

    def cell_diameters(self):
        return self.edge_lengths().max(axis=1)

    def cell_inball_diameters(self):
        """Diameter of the inscribed circle, 4*area / perimeter."""
        return 4.0 * self.cell_areas() / self.edge_lengths().sum(axis=1)

    def barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    def facet_vertices(self, markers=None):
        """Vertex indices lying on boundary facets with the given markers."""
        if markers is None:
            sel = slice(None)
        else:
            sel = np.isin(self.facet_markers, np.asarray(list(markers)))
        return np.unique(self.facets[sel])

    # -- internals ---------------------------------------------------------

    def _edge_pairs(self):
        c = self.cells
        pairs = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
        return np.sort(pairs, axis=1)

    def _check_conforming(self):
        pairs = self._edge_pairs()
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise ValueError("non-conforming mesh: an edge is shared by >2 cells")
        boundary = uniq[counts == 1]
        declared = np.sort(self.facets, axis=1)
        declared = declared[np.lexsort((declared[:, 1], declared[:, 0]))]
        if boundary.shape != declared.shape or not np.array_equal(boundary, declared):
            raise ValueError("facet list does not match the topological boundary")


def unit_square_mesh(n, pattern="right"):
    """Uniform n-by-n triangulation of the unit square, 2*n**2 cells.

    pattern selects the diagonal direction of every square: "right" runs
    lower-left to upper-right, "left" the other way.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if pattern not in ("right", "left"):
        raise ValueError(f"unknown pattern {pattern!r}")

    coords = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    cells = []
    for j in range(n):
        for i in range(n):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            if pattern == "right":
                cells.append((v00, v10, v11))
                cells.append((v00, v11, v01))
            else:
                cells.append((v00, v10, v01))
                cells.append((v10, v11, v01))

    facets, markers = [], []
    for i in range(n):
        facets.append((vid(i, 0), vid(i + 1, 0)))
        markers.append(BOTTOM)
        facets.append((vid(n, i), vid(n, i + 1)))
        markers.append(RIGHT)
        facets.append((vid(i + 1, n), vid(i, n)))
        markers.append(TOP)
        facets.append((vid(0, i + 1), vid(0, i)))
        markers.append(LEFT)

    return TriMesh(vertices, np.array(cells), np.array(facets),
                   np.array(markers), level=n)


def barycentric_refine(mesh):
    """Split every cell into three by inserting its barycenter."""
    nv = mesh.num_vertices
    centers = mesh.barycenters()
    vertices = np.vstack([mesh.vertices, centers])
    c = mesh.cells
    cid = nv + np.arange(mesh.num_cells)
    cells = np.concatenate([
        np.column_stack([c[:, 0], c[:, 1], cid]),
        np.column_stack([c[:, 1], c[:, 2], cid]),
        np.column_stack([c[:, 2], c[:, 0], cid]),
    ])
    # interleave children so they stay grouped by parent
    order = np.argsort(np.tile(np.arange(mesh.num_cells), 3), kind="stable")
    return TriMesh(vertices, cells[order], mesh.facets.copy(),
                   mesh.facet_markers.copy(), level=mesh.level)


def mesh_metrics(mesh):
    """Return (h_max, shape_ratio_max) with shape ratio h_K / rho_K."""
    h = mesh.cell_diameters()
    rho = mesh.cell_inball_diameters()
    return float(h.max()), float((h / rho).max())


def dump_mesh(mesh, path):
    """Plain-text dump: counts, vertex lines, cell lines, facet+marker lines."""
    with open(path, "w") as f:
        f.write(f"{mesh.num_vertices} {mesh.num_cells} {len(mesh.facets)}\n")
        for x, y in mesh.vertices:
            f.write(f"{x!r} {y!r}\n")
        for a, b, c in mesh.cells:
            f.write(f"{a} {b} {c}\n")
        for (a, b), m in zip(mesh.facets, mesh.facet_markers):
            f.write(f"{a} {b} {m}\n")
