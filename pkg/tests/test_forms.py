import numpy as np
import pytest

from rheoflow.constitutive import (ActivatedEulerNS, BinghamPapanastasiou,
                                   Carreau, Newtonian)
from rheoflow.fespace import element_pair_spaces, interpolate
from rheoflow.forms import (DirichletBC, FormParams, ThreeFieldProblem,
                            ThreeFieldState, assemble_jacobian,
                            assemble_residual, select_b_variant, trilinear_b,
                            zero_state)
from rheoflow.mesh import barycentric_refine, unit_square_mesh


def make_problem(model=None, pair="taylor-hood", n=2, bary=False,
                 params=None, bcs=None, **kwargs):
    mesh = unit_square_mesh(n)
    if bary:
        mesh = barycentric_refine(mesh)
    S, V, P = element_pair_spaces(mesh, pair)
    if model is None:
        model = Newtonian(nu=0.5)
    if params is None:
        params = FormParams()
    if bcs is None:
        bcs = [DirichletBC((1, 2, 3, 4), lambda x: np.zeros_like(x))]
    problem = ThreeFieldProblem(S, V, P, model, params, bcs, **kwargs)
    return problem, (S, V, P)


def random_state(problem, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    x = scale * rng.normal(size=problem.dim)
    return problem.apply_bcs(x)


def test_zero_state_zero_residual():
    problem, _ = make_problem()
    res = problem.residual(np.zeros(problem.dim))
    assert np.allclose(res, 0.0, atol=1e-14)


def test_stokes_polynomial_exactness():
    # u = (y, 0), p = 0, S = 2 nu D(u): an exact steady Stokes solution
    nu = 0.5
    problem, (S, V, P) = make_problem(
        model=Newtonian(nu=nu), pair="taylor-hood", n=3,
        bcs=[DirichletBC((1, 2, 3, 4),
                         lambda x: np.stack([x[:, 1], np.zeros(len(x))],
                                            axis=-1))])
    u = interpolate(V, lambda x: np.stack([x[:, 1], np.zeros(len(x))],
                                          axis=-1))
    s = interpolate(S, lambda x: np.tile([0.0, 0.0, nu], (len(x), 1)))
    x = np.concatenate([s.coeffs, u.coeffs, np.zeros(P.dim)])
    res = problem.residual(x)
    assert np.abs(res).max() <= 1e-10


def test_penalty_constant_field():
    # penalty residual for u = c: (1/l)|c|^(2r'-2) c . int(phi)
    r = 1.5
    inv_l = 0.7
    c = np.array([0.3, -0.4])
    problem, (S, V, P) = make_problem(
        params=FormParams(inv_l=inv_l, r=r),
        bcs=[])
    u = interpolate(V, lambda x: np.tile(c, (len(x), 1)))
    x = np.concatenate([np.zeros(S.dim), u.coeffs, np.zeros(P.dim)])
    res = problem.residual(x)
    rp = r / (r - 1.0)
    # compare the total momentum residual against the closed form:
    # sum over the u-block of component i equals |c|^{2r'-2} c_i * area
    # (partition of unity: sum_m phi_m = 1)
    ru = res[S.dim:S.dim + V.dim].reshape(-1, 2)
    mag = np.linalg.norm(c)
    expected = inv_l * mag ** (2 * rp - 2) * c  # times total area 1
    # S-block couples -2 nu D(u)=0; stress part zero so only penalty remains
    assert np.allclose(ru.sum(axis=0), expected, atol=1e-12)


@pytest.mark.parametrize("model", [
    Newtonian(nu=0.5),
    Carreau(nu=0.5, eps=1e-5, r=1.5),
    BinghamPapanastasiou(bn=1.0, m=200.0),
    ActivatedEulerNS(nu=0.5, delta_s=2.5, m=200.0),
], ids=lambda m: type(m).__name__)
@pytest.mark.parametrize("variant", ["divfree", "skew"])
def test_jacobian_matches_finite_differences(model, variant):
    params = FormParams(tau=0.1, inv_l=0.5, r=getattr(model, "r", 2.0),
                        convection=True, b_variant=variant)
    problem, _ = make_problem(model=model, params=params)
    x = random_state(problem, seed=42)
    u_prev = 0.1 * np.random.default_rng(1).normal(size=problem.nU)
    jac = problem.jacobian(x).tocsr()
    rng = np.random.default_rng(7)
    for _ in range(3):
        delta = rng.normal(size=problem.dim)
        jv = jac @ delta
        best = np.inf
        for h in (1e-4, 1e-5, 1e-6, 1e-7):
            rp = problem.residual(x + h * delta, u_prev)
            rm = problem.residual(x - h * delta, u_prev)
            fd = (rp - rm) / (2 * h)
            best = min(best, np.linalg.norm(jv - fd)
                       / max(np.linalg.norm(fd), 1e-14))
        assert best <= 1e-6, (type(model).__name__, variant, best)


def test_linear_problem_constant_jacobian():
    problem, _ = make_problem(model=Newtonian(nu=0.5),
                              params=FormParams())
    x1 = random_state(problem, seed=1)
    x2 = random_state(problem, seed=2)
    j1 = problem.jacobian(x1).tocsr()
    j2 = problem.jacobian(x2).tocsr()
    assert np.array_equal(j1.indptr, j2.indptr)
    assert np.array_equal(j1.indices, j2.indices)
    assert np.array_equal(j1.data, j2.data)


def test_pressure_pressure_block_zero():
    problem, _ = make_problem()
    jac = problem.jacobian(random_state(problem)).tocsr()
    start = problem.nS + problem.nU
    block = jac[start:, start:]
    assert block.nnz == 0 or np.abs(block.data).max() == 0.0


def test_dirichlet_rows_replaced():
    problem, _ = make_problem()
    x = random_state(problem, seed=3)
    res = problem.residual(x)
    dofs, vals = problem.bc_values()
    assert np.allclose(res[problem.nS + dofs],
                       x[problem.nS + dofs] - vals)
    jac = problem.jacobian(x).tocsr()
    for d in (problem.nS + dofs)[:5]:
        row = jac[d].toarray().ravel()
        assert row[d] == 1.0
        row[d] = 0.0
        assert np.abs(row).max() == 0.0


def test_dirichlet_other_rows_unchanged():
    # identical assembly with and without a BC must agree on free rows
    problem_bc, _ = make_problem(n=2)
    problem_free, _ = make_problem(n=2, bcs=[])
    x = random_state(problem_free, seed=5)
    r1 = problem_bc.residual(x)
    r2 = problem_free.residual(x)
    free = np.ones(problem_bc.dim, dtype=bool)
    free[problem_bc.nS + problem_bc.bc_dofs] = False
    assert np.array_equal(r1[free], r2[free])


def test_trilinear_skew_self_zero():
    mesh = unit_square_mesh(3)
    _, V, _ = element_pair_spaces(mesh, "taylor-hood")
    rng = np.random.default_rng(0)
    from rheoflow.fespace import DiscreteField
    u = DiscreteField(V, rng.normal(size=V.dim))
    val = trilinear_b(u, u, u, "skew")
    scale = float(np.abs(u.coeffs).max()) ** 3
    assert abs(val) <= 1e-12 * max(scale, 1.0)


def test_trilinear_divfree_rotation():
    mesh = unit_square_mesh(3)
    _, V, _ = element_pair_spaces(mesh, "taylor-hood")
    u = interpolate(V, lambda x: np.stack([x[:, 1], -x[:, 0]], axis=-1))
    val = trilinear_b(u, u, u, "divfree")
    assert abs(val) <= 1e-12


def test_trilinear_divfree_closed_form():
    mesh = unit_square_mesh(4)
    _, V, _ = element_pair_spaces(mesh, "taylor-hood")
    ones = interpolate(V, lambda x: np.tile([1.0, 0.0], (len(x), 1)))
    w = interpolate(V, lambda x: np.stack([x[:, 0], np.zeros(len(x))],
                                          axis=-1))
    # -int (e1 (x) e1) : D(w) = -int d_1 w_1 = -1 on the unit square
    val = trilinear_b(ones, ones, w, "divfree")
    assert val == pytest.approx(-1.0, abs=1e-12)


def test_select_b_variant():
    assert select_b_variant("scott-vogelius") == "divfree"
    assert select_b_variant("taylor-hood") == "skew"


def test_spec_wrappers():
    mesh = unit_square_mesh(2)
    S, V, P = element_pair_spaces(mesh, "taylor-hood")
    bcs = [DirichletBC((1, 2, 3, 4), lambda x: np.zeros_like(x))]
    state = zero_state(S, V, P, bcs)
    res = assemble_residual(state, None, Newtonian(nu=1.0), FormParams())
    assert np.allclose(res, 0.0)
    jac = assemble_jacobian(state, Newtonian(nu=1.0), FormParams())
    assert jac.shape == (state.vector().size,) * 2


def test_mismatched_spaces_rejected():
    mesh1 = unit_square_mesh(2)
    mesh2 = unit_square_mesh(3)
    S, V, _ = element_pair_spaces(mesh1, "taylor-hood")
    _, _, P = element_pair_spaces(mesh2, "taylor-hood")
    with pytest.raises(ValueError):
        ThreeFieldProblem(S, V, P, Newtonian(nu=1.0), FormParams())
