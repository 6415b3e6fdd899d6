import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maternmlmc.fem import (
    FemError,
    Field,
    FunctionSpace,
    assemble_helmholtz,
    assemble_mass,
    assemble_weighted_stiffness,
    apply_dirichlet,
    embedded_dof_map,
    evaluation_matrix,
    interpolation_matrix,
    l2_norm_sq,
    lagrange_nodes,
    quadrature_rule,
    reference_mass,
    reference_mass_chol,
    tabulate,
)
from maternmlmc.mesh import build_embedded_pair, generate_structured, perturb_interior, refine_uniform

BOX = (-1.0, 1.0, -1.0, 1.0)


# exact monomial integrals over the reference triangle {x,y>=0, x+y<=1}:
# integral x^a y^b = a! b! / (a+b+2)!
def monomial_integral(a, b):
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6])
def test_quadrature_integrates_monomials_exactly(degree):
    pts, wts = quadrature_rule(degree)
    assert wts.sum() == pytest.approx(0.5, rel=1e-14)
    assert (wts > 0).all()
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            val = (wts * pts[:, 0] ** a * pts[:, 1] ** b).sum()
            assert val == pytest.approx(monomial_integral(a, b), rel=1e-13), (
                f"x^{a} y^{b} at rule degree {degree}"
            )


def test_quadrature_points_inside_reference_triangle():
    for degree in range(1, 7):
        pts, _ = quadrature_rule(degree)
        assert pts.min() >= 0.0
        assert (pts.sum(axis=1) <= 1.0 + 1e-14).all()


def test_p1_reference_mass_matches_closed_form():
    expected = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    assert np.allclose(reference_mass(1), expected, rtol=0, atol=1e-15)


def test_p2_reference_mass_row_sums():
    # rows of the mass matrix sum to the integral of each basis function;
    # for P2 the vertex functions integrate to 0 and edge ones to 1/6
    M = reference_mass(2)
    sums = M.sum(axis=1)
    nodes = lagrange_nodes(2)
    vertex = [i for i, p in enumerate(nodes)
              if {tuple(p)} <= {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)}]
    for i, s in enumerate(sums):
        assert s == pytest.approx(0.0 if i in vertex else 1.0 / 6.0, abs=1e-14)
    assert M.sum() == pytest.approx(0.5, rel=1e-13)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_reference_mass_cholesky(degree):
    M = reference_mass(degree)
    L = reference_mass_chol(degree)
    assert np.allclose(L @ L.T, M, atol=1e-14)
    assert (np.diag(L) > 0).all()


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_basis_is_nodal_and_partitions_unity(degree):
    nodes = lagrange_nodes(degree)
    vals = tabulate(degree, nodes)
    assert np.allclose(vals, np.eye(len(nodes)), atol=1e-12)
    pts, _ = quadrature_rule(4)
    assert np.allclose(tabulate(degree, pts).sum(axis=1), 1.0, atol=1e-12)


def test_function_space_dof_counts():
    mesh = generate_structured(4, box=BOX)
    assert FunctionSpace(mesh, 1).num_dofs == mesh.num_vertices
    ne = (3 * mesh.num_cells + len(mesh.boundary_edges)) // 2
    assert FunctionSpace(mesh, 2).num_dofs == mesh.num_vertices + ne


def test_function_space_rejects_bad_degree():
    mesh = generate_structured(2, box=BOX)
    with pytest.raises(FemError):
        FunctionSpace(mesh, 0)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_global_mass_total_is_domain_area(degree):
    mesh = perturb_interior(refine_uniform(generate_structured(4, box=BOX)), 0.2, seed=3)
    space = FunctionSpace(mesh, degree)
    M = assemble_mass(space)
    assert M.sum() == pytest.approx(4.0, rel=1e-12)
    # symmetry
    assert abs(M - M.T).max() < 1e-14


def test_mass_quadratic_form_is_l2_norm():
    mesh = generate_structured(8, box=BOX)
    space = FunctionSpace(mesh, 2)
    M = assemble_mass(space)
    x, y = space.dof_coords.T
    # f(x,y) = x + y is in the P2 space; ||f||^2 over the box = 8/3
    f = x + y
    assert f @ (M @ f) == pytest.approx(8.0 / 3.0, rel=1e-12)
    g = x * y
    # ||xy||^2 = (integral x^2)(integral y^2) = (2/3)^2
    assert g @ (M @ g) == pytest.approx(4.0 / 9.0, rel=1e-12)


def test_helmholtz_is_mass_plus_scaled_stiffness():
    mesh = generate_structured(4, box=BOX)
    space = FunctionSpace(mesh, 1)
    kappa = 3.0
    A = assemble_helmholtz(space, kappa)
    M = assemble_mass(space)
    K = A - M.multiply(1.0)
    # constants are in the kernel of the stiffness part
    ones = np.ones(space.num_dofs)
    assert np.allclose(K @ ones, 0.0, atol=1e-13)
    # quadratic form of K on f = x equals |D|/kappa^2
    x = space.dof_coords[:, 0]
    assert x @ (K @ x) == pytest.approx(4.0 / kappa**2, rel=1e-12)


def test_weighted_stiffness_unit_weight_matches_laplacian():
    mesh = generate_structured(4, box=BOX)
    space = FunctionSpace(mesh, 1)
    zero = Field(space, np.zeros(space.num_dofs))
    Kw = assemble_weighted_stiffness(space, zero)  # weight exp(0) = 1
    A = assemble_helmholtz(space, 1.0)
    M = assemble_mass(space)
    assert abs((A - M) - Kw).max() < 1e-12


def test_apply_dirichlet_pins_boundary_rows():
    mesh = generate_structured(4, box=BOX)
    space = FunctionSpace(mesh, 1)
    A = assemble_helmholtz(space, 2.0)
    rhs = np.ones(space.num_dofs)
    A2, rhs2 = apply_dirichlet(A, rhs, space)
    bdofs = space.boundary_dofs
    assert len(bdofs) == len(mesh.boundary_vertices)
    assert np.allclose(rhs2[bdofs], 0.0)
    A2 = A2.tocsr()
    for d in bdofs[:5]:
        row = A2[d].toarray().ravel()
        assert row[d] == 1.0 and np.count_nonzero(row) == 1


def test_l2_norm_sq_of_interpolated_polynomial():
    mesh = generate_structured(16, box=(0.0, 1.0, 0.0, 1.0))
    space = FunctionSpace(mesh, 2)
    x, y = space.dof_coords.T
    f = Field(space, x**2 - y)
    # exact: integral (x^2 - y)^2 over unit square = 1/5 - 1/3 + 1/3 = 1/5;
    # cross term: -2 * (1/3)(1/2) = -1/3; y^2 term: 1/3
    exact = 1.0 / 5.0 - 1.0 / 3.0 + 1.0 / 3.0
    assert l2_norm_sq(f) == pytest.approx(exact, rel=1e-12)


def test_interpolation_matrix_reproduces_fields_on_subcell():
    mesh = generate_structured(2, box=BOX)
    space = FunctionSpace(mesh, 2)
    # a small triangle strictly inside cell 0
    parent = 0
    tri = mesh.cell_coords(parent)
    sub = tri[0][None] + 0.2 * (tri - tri[0]) + 0.1 * (tri[1] - tri[0])[None]
    R = interpolation_matrix(space, parent, sub)
    # P2 field restricted to the subcell must be reproduced exactly at
    # the subcell's own P2 nodes
    x, y = space.dof_coords.T
    f = x**2 + 2 * x * y - y
    sub_nodes = lagrange_nodes(2) @ np.array([sub[1] - sub[0], sub[2] - sub[0]]) + sub[0]
    fx, fy = sub_nodes.T
    assert np.allclose(R @ f[space.cell_dofs[parent]],
                       fx**2 + 2 * fx * fy - fy, atol=1e-12)


def test_evaluation_matrix_partition_of_unity():
    mesh = perturb_interior(refine_uniform(generate_structured(3, box=BOX)), 0.15, seed=9)
    space = FunctionSpace(mesh, 2)
    pts = np.array([[0.0, 0.0], [0.3, -0.7], [0.99, 0.99], [-1.0, 1.0]])
    E = evaluation_matrix(space, pts)
    assert np.allclose(np.asarray(E.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    x, y = space.dof_coords.T
    f = 1.0 - x + 0.5 * y
    assert np.allclose(E @ f, 1.0 - pts[:, 0] + 0.5 * pts[:, 1], atol=1e-12)


def test_embedded_dof_map_identifies_coincident_nodes():
    pair = build_embedded_pair((-0.5, 0.5, -0.5, 0.5), BOX, nx=4)
    for degree in (1, 2):
        outer_s = FunctionSpace(pair.outer, degree)
        inner_s = FunctionSpace(pair.inner, degree)
        dmap = embedded_dof_map(outer_s, inner_s, pair.cell_map)
        assert np.allclose(outer_s.dof_coords[dmap], inner_s.dof_coords,
                           atol=1e-12)
        assert len(np.unique(dmap)) == inner_s.num_dofs


@settings(max_examples=25, deadline=None)
@given(degree=st.integers(min_value=1, max_value=3),
       seed=st.integers(min_value=0, max_value=1000))
def test_mass_spd_on_random_perturbations(degree, seed):
    mesh = perturb_interior(generate_structured(3, box=BOX), 0.25, seed=seed)
    M = assemble_mass(FunctionSpace(mesh, degree)).toarray()
    eigvals = np.linalg.eigvalsh(M)
    assert eigvals.min() > 0.0
