import numpy as np
import pytest

from rheoflow.mesh import (TriMesh, barycentric_refine, dump_mesh,
                           mesh_metrics, unit_square_mesh)


def test_unit_square_counts():
    m1 = unit_square_mesh(1)
    assert m1.num_cells == 2 and m1.num_vertices == 4
    m2 = unit_square_mesh(2)
    assert m2.num_cells == 8 and m2.num_vertices == 9


def test_invalid_n():
    with pytest.raises(ValueError):
        unit_square_mesh(0)


@pytest.mark.parametrize("pattern", ["right", "left"])
def test_areas_and_h(pattern):
    m = unit_square_mesh(4, pattern)
    assert abs(m.cell_areas().sum() - 1.0) <= 1e-12
    h_max, ratio = mesh_metrics(m)
    assert h_max == pytest.approx(np.sqrt(2.0) / 4)
    assert ratio <= 10.0


def test_uniform_refinement_preserves_shape():
    _, r2 = mesh_metrics(unit_square_mesh(2))
    _, r4 = mesh_metrics(unit_square_mesh(4))
    assert r2 == pytest.approx(r4, rel=1e-12)
    # halving h
    h2, _ = mesh_metrics(unit_square_mesh(2))
    h4, _ = mesh_metrics(unit_square_mesh(4))
    assert h4 == pytest.approx(h2 / 2)


def test_reference_simplex_shape_ratio():
    # single right triangle: inradius (2 - sqrt 2)/2, diameter sqrt 2
    m = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]),
                np.array([1, 2, 4]))
    _, ratio = mesh_metrics(m)
    assert ratio == pytest.approx(np.sqrt(2.0) / (2.0 - np.sqrt(2.0)))


def test_affine_map_roundtrip():
    m = unit_square_mesh(3)
    ref = np.array([[0.2, 0.3], [0.0, 0.0], [0.5, 0.5]])
    for cell in range(m.num_cells):
        amap = m.affine_map(cell)
        back = amap.invert(amap.apply(ref))
        assert np.allclose(back, ref, atol=1e-13)
        verts = amap.apply(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        assert np.allclose(verts, m.vertices[m.cells[cell]])


def test_barycentric_refine():
    m = unit_square_mesh(2)
    mb = barycentric_refine(m)
    assert mb.num_cells == 3 * m.num_cells
    assert mb.num_vertices == 9 + 8 == 17
    assert abs(mb.cell_areas().sum() - 1.0) <= 1e-12
    # boundary edges and markers preserved
    assert np.array_equal(np.sort(mb.facets, axis=1),
                          np.sort(m.facets, axis=1))
    assert np.array_equal(mb.facet_markers, m.facet_markers)


def test_barycenter_location():
    m = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]),
                np.array([1, 2, 4]))
    mb = barycentric_refine(m)
    assert np.allclose(mb.vertices[-1], [1 / 3, 1 / 3])


def test_boundary_markers():
    m = unit_square_mesh(3)
    bottom = m.facet_vertices([1])
    assert np.allclose(m.vertices[bottom][:, 1], 0.0)
    left = m.facet_vertices([4])
    assert np.allclose(m.vertices[left][:, 0], 0.0)


def test_nonconforming_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0],
                      [0.5, 0.5]])
    # cells overlap (hanging node at the diagonal midpoint)
    cells = np.array([[0, 1, 3], [0, 3, 2], [0, 1, 4]])
    with pytest.raises(ValueError):
        TriMesh(verts, cells, np.zeros((0, 2), dtype=int),
                np.zeros(0, dtype=int))


def test_dump_mesh(tmp_path):
    m = unit_square_mesh(2)
    path = tmp_path / "mesh.txt"
    dump_mesh(m, path)
    lines = path.read_text().strip().splitlines()
    nv, nc, nf = map(int, lines[0].split())
    assert (nv, nc, nf) == (m.num_vertices, m.num_cells, len(m.facets))
    assert len(lines) == 1 + nv + nc + nf
