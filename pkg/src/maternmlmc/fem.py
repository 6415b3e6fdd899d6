"""Lagrange finite elements of degree 1-3 on triangle meshes.

Reference element: the unit triangle with vertices (0,0), (1,0), (0,1) and
equispaced Lagrange nodes.  Basis functions are represented in the monomial
basis through the inverse Vandermonde matrix, which is exact and well
conditioned for the degrees supported here.

Mass matrices exploit the affine map: the local mass of any cell is the
reference mass scaled by |e| / |e_ref|, so only one factorization of the
reference mass is ever needed.  Stiffness-type matrices contract a constant
reference tensor against per-cell geometry factors, so global assembly is a
single einsum plus a COO->CSR conversion.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import GridIndex, Mesh

__all__ = [
    "Field",
    "FunctionSpace",
    "FemError",
    "quadrature_rule",
    "lagrange_nodes",
    "tabulate",
    "tabulate_grad",
    "reference_mass",
    "reference_mass_chol",
    "assemble_mass",
    "assemble_helmholtz",
    "assemble_weighted_stiffness",
    "apply_dirichlet",
    "interpolation_matrix",
    "l2_norm_sq",
    "embedded_dof_map",
    "evaluate_at_points",
    "evaluation_matrix",
    "save_field_csv",
]

REFERENCE_AREA = 0.5


class FemError(ValueError):
    """Invalid finite element input."""


# ---------------------------------------------------------------------------
# quadrature

def _symmetric_rule(groups):
    """Expand (weight, barycentric orbit) groups into points and weights."""
    pts, wts = [], []
    for w, bary in groups:
        seen = []
        for perm in (
            (0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (2, 1, 0), (1, 0, 2)
        ):
            p = tuple(bary[i] for i in perm)
            if not any(
                abs(p[0] - q[0]) + abs(p[1] - q[1]) + abs(p[2] - q[2]) < 1e-14
                for q in seen
            ):
                seen.append(p)
        for l1, l2, l3 in seen:
            pts.append((l2, l3))  # x = lambda2, y = lambda3
            wts.append(w)
    return np.array(pts), np.array(wts) * REFERENCE_AREA


# Symmetric rules on the triangle (Dunavant); weights are normalized to sum
# to 1 before the reference-area scaling in _symmetric_rule.
_RULES = {
    1: _symmetric_rule([(1.0, (1 / 3, 1 / 3, 1 / 3))]),
    2: _symmetric_rule([(1 / 3, (2 / 3, 1 / 6, 1 / 6))]),
    4: _symmetric_rule(
        [
            (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
            (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
        ]
    ),
    5: _symmetric_rule(
        [
            (0.225, (1 / 3, 1 / 3, 1 / 3)),
            (0.132394152788506, (0.059715871789770, 0.470142064105115, 0.470142064105115)),
            (0.125939180544827, (0.797426985353087, 0.101286507323456, 0.101286507323456)),
        ]
    ),
}


def _collapsed_rule(q):
    """Tensor rule on the collapsed square, exact to total degree 2q - 2.

    Gauss-Jacobi absorbs the (1 - x) Jacobian of the map
    (u, v) -> (u, v (1 - u)), so all weights are positive.
    """
    from scipy.special import roots_jacobi, roots_legendre

    xj, wj = roots_jacobi(q, 1.0, 0.0)
    u = 0.5 * (xj + 1.0)
    wu = wj * 0.25
    xl, wl = roots_legendre(q)
    v = 0.5 * (xl + 1.0)
    wv = wl * 0.5
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    wts = np.outer(wu, wv).ravel()
    return pts, wts


@lru_cache(maxsize=None)
def quadrature_rule(degree: int):
    """Points and weights on the reference triangle, exact for polynomials
    of the given total degree.  Weights sum to the reference area 1/2."""
    if degree < 0:
        raise FemError(f"quadrature degree must be >= 0, got {degree}")
    for d in sorted(_RULES):
        if degree <= d:
            return _RULES[d]
    q = degree // 2 + 1
    return _collapsed_rule(q)


# ---------------------------------------------------------------------------
# reference element

@lru_cache(maxsize=None)
def lagrange_nodes(degree: int):
    """Equispaced Lagrange nodes: 3 vertices, degree-1 nodes per edge
    (ordered along the edge), then interior nodes."""
    if degree not in (1, 2, 3):
        raise FemError(f"only degrees 1-3 are supported, got {degree}")
    verts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
    nodes = list(verts)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        for j in range(1, degree):
            t = j / degree
            nodes.append(
                (
                    verts[a][0] + t * (verts[b][0] - verts[a][0]),
                    verts[a][1] + t * (verts[b][1] - verts[a][1]),
                )
            )
    if degree == 3:
        nodes.append((1 / 3, 1 / 3))
    out = np.array(nodes)
    out.setflags(write=False)
    return out


def _monomial_exponents(degree):
    return [(i, j) for total in range(degree + 1) for i in range(total, -1, -1)
            for j in (total - i,)]


@lru_cache(maxsize=None)
def _basis_coefficients(degree: int):
    nodes = lagrange_nodes(degree)
    exps = _monomial_exponents(degree)
    V = np.array(
        [[x ** i * y ** j for (i, j) in exps] for (x, y) in nodes]
    )
    return np.linalg.inv(V), exps


def tabulate(degree: int, points):
    """Basis values at reference points, shape (n_points, n_basis)."""
    coeff, exps = _basis_coefficients(degree)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = points[:, 0], points[:, 1]
    mono = np.stack([x ** i * y ** j for (i, j) in exps], axis=1)
    return mono @ coeff


def tabulate_grad(degree: int, points):
    """Reference gradients at points, shape (n_points, n_basis, 2)."""
    coeff, exps = _basis_coefficients(degree)
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = points[:, 0], points[:, 1]
    dx = np.stack(
        [i * x ** max(i - 1, 0) * y ** j for (i, j) in exps], axis=1
    )
    dy = np.stack(
        [j * x ** i * y ** max(j - 1, 0) for (i, j) in exps], axis=1
    )
    return np.stack([dx @ coeff, dy @ coeff], axis=2)


@lru_cache(maxsize=None)
def reference_mass(degree: int):
    """Mass matrix of the reference triangle (area 1/2)."""
    pts, wts = quadrature_rule(2 * degree)
    phi = tabulate(degree, pts)
    M = np.einsum("q,qi,qj->ij", wts, phi, phi)
    M = 0.5 * (M + M.T)
    M.setflags(write=False)
    return M


@lru_cache(maxsize=None)
def reference_mass_chol(degree: int):
    """Lower Cholesky factor of the reference mass matrix."""
    H = np.linalg.cholesky(reference_mass(degree))
    H.setflags(write=False)
    return H


# ---------------------------------------------------------------------------
# function spaces

class FunctionSpace:
    """Continuous Lagrange space of degree 1-3 on a mesh.

    Degrees of freedom are numbered vertices first, then edge dofs (ordered
    along each edge from its lower-numbered vertex), then cell-interior
    dofs, which makes shared dofs agree between neighbouring cells.
    """

    def __init__(self, mesh: Mesh, degree: int):
        if degree not in (1, 2, 3):
            raise FemError(f"only degrees 1-3 are supported, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.num_dofs, self.cell_dofs, self.dof_coords = self._build_dofs()
        self.cell_dofs.setflags(write=False)
        self.dof_coords.setflags(write=False)
        self._mass = None
        self._locator = None
        self._boundary_dofs = None

    def _build_dofs(self):
        mesh, p = self.mesh, self.degree
        nv = mesh.num_vertices
        edges, cell_edges, _ = mesh._edges()
        ne = len(edges)
        n_edge = p - 1
        n_int = 1 if p == 3 else 0
        num = nv + ne * n_edge + mesh.num_cells * n_int

        cd = np.empty((mesh.num_cells, (p + 1) * (p + 2) // 2), dtype=np.int64)
        cd[:, :3] = mesh.cells
        col = 3
        for loc, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            eid = cell_edges[:, loc]
            # edge slots run along the edge from its lower-numbered vertex;
            # flip them in cells that traverse the edge the other way
            forward = mesh.cells[:, a] == edges[eid, 0]
            base = nv + eid * n_edge
            for j in range(n_edge):
                cd[:, col + j] = np.where(forward, base + j, base + n_edge - 1 - j)
            col += n_edge
        if n_int:
            cd[:, col] = nv + ne * n_edge + np.arange(mesh.num_cells)

        coords = np.empty((num, 2))
        coords[:nv] = mesh.vertices
        if n_edge:
            lo = mesh.vertices[edges[:, 0]]
            hi = mesh.vertices[edges[:, 1]]
            for j in range(n_edge):
                t = (j + 1) / p
                coords[nv + j : nv + ne * n_edge : n_edge] = lo + t * (hi - lo)
        if n_int:
            coords[nv + ne * n_edge :] = mesh.cell_coords().mean(axis=1)
        return num, cd, coords

    @property
    def boundary_dofs(self):
        """Dofs whose nodes lie on the mesh boundary."""
        if self._boundary_dofs is None:
            mesh, p = self.mesh, self.degree
            edges, _, counts = mesh._edges()
            out = [mesh.boundary_vertices]
            if p > 1:
                bidx = np.flatnonzero(counts == 1)
                base = mesh.num_vertices + bidx * (p - 1)
                out.append((base[:, None] + np.arange(p - 1)).ravel())
            self._boundary_dofs = np.unique(np.concatenate(out))
        return self._boundary_dofs

    def mass_matrix(self):
        if self._mass is None:
            self._mass = assemble_mass(self)
        return self._mass

    def locator(self) -> GridIndex:
        if self._locator is None:
            self._locator = GridIndex(self.mesh)
        return self._locator

    def __repr__(self):
        return (
            f"FunctionSpace(degree={self.degree}, num_dofs={self.num_dofs}, "
            f"mesh={self.mesh!r})"
        )


@dataclass
class Field:
    """A finite element function: a space plus its coefficient vector."""

    space: FunctionSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (self.space.num_dofs,):
            raise FemError(
                f"expected {self.space.num_dofs} coefficients, "
                f"got shape {self.coefficients.shape}"
            )


# ---------------------------------------------------------------------------
# geometry helpers

def _cell_geometry(mesh):
    """Jacobians, inverse-transpose products and areas for all cells."""
    v = mesh.cell_coords()
    J = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    inv[:, 1, 1] = J[:, 0, 0]
    inv /= det[:, None, None]
    return J, inv, det


def _to_csr(rows, cols, vals, shape):
    A = sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    return A.tocsr()


def _scatter_pattern(cell_dofs):
    m = cell_dofs.shape[1]
    rows = np.repeat(cell_dofs, m, axis=1)
    cols = np.tile(cell_dofs, (1, m))
    return rows, cols


# ---------------------------------------------------------------------------
# assembly

def assemble_mass(space: FunctionSpace):
    """Global mass matrix M_ij = integral of phi_i phi_j, CSR."""
    M_ref = reference_mass(space.degree)
    scale = space.mesh.areas / REFERENCE_AREA
    vals = scale[:, None, None] * M_ref[None, :, :]
    rows, cols = _scatter_pattern(space.cell_dofs)
    return _to_csr(rows, cols, vals, (space.num_dofs, space.num_dofs))


def _stiffness_values(space):
    """Per-cell stiffness blocks for unit coefficient."""
    pts, wts = quadrature_rule(max(2 * (space.degree - 1), 0))
    grad = tabulate_grad(space.degree, pts)
    # T[a, b, i, j] = sum_q w_q d_a phi_i d_b phi_j
    T = np.einsum("q,qia,qjb->abij", wts, grad, grad)
    _, inv, det = _cell_geometry(space.mesh)
    G = np.einsum("cab,cdb->cad", inv, inv) * det[:, None, None]
    return np.einsum("cab,abij->cij", G, T)


def assemble_helmholtz(space: FunctionSpace, kappa: float):
    """A_ij = (phi_i, phi_j) + kappa^-2 (grad phi_i, grad phi_j), CSR."""
    if kappa <= 0:
        raise FemError(f"kappa must be positive, got {kappa}")
    M_ref = reference_mass(space.degree)
    scale = space.mesh.areas / REFERENCE_AREA
    vals = scale[:, None, None] * M_ref[None, :, :]
    vals = vals + _stiffness_values(space) / kappa**2
    rows, cols = _scatter_pattern(space.cell_dofs)
    return _to_csr(rows, cols, vals, (space.num_dofs, space.num_dofs))


def assemble_weighted_stiffness(space: FunctionSpace, log_coeff: Field):
    """K_ij = integral of exp(u_h) grad phi_i . grad phi_j, CSR.

    ``log_coeff`` is a field on the same mesh (any supported degree); its
    exponential is evaluated at quadrature points of degree 7 accuracy.
    """
    if log_coeff.space.mesh is not space.mesh:
        raise FemError("coefficient field must live on the same mesh")
    pts, wts = quadrature_rule(7)
    grad = tabulate_grad(space.degree, pts)
    phi_c = tabulate(log_coeff.space.degree, pts)
    u_q = log_coeff.coefficients[log_coeff.space.cell_dofs] @ phi_c.T
    w_q = np.exp(u_q) * wts[None, :]
    _, inv, det = _cell_geometry(space.mesh)
    G = np.einsum("cab,cdb->cad", inv, inv) * det[:, None, None]
    # contract: sum_q w_cq (J^-T grad_i)_a (J^-T grad_j)_a
    vals = np.einsum("cq,qia,cab,qjb->cij", w_q, grad, G, grad, optimize=True)
    rows, cols = _scatter_pattern(space.cell_dofs)
    return _to_csr(rows, cols, vals, (space.num_dofs, space.num_dofs))


def apply_dirichlet(A, rhs, space: FunctionSpace, value: float = 0.0):
    """Impose u = value on boundary dofs by symmetric elimination.

    Returns new (A, rhs): boundary rows and columns of A are zeroed with a
    unit diagonal, and the rhs absorbs the column contribution so the
    reduced system stays symmetric.
    """
    bd = space.boundary_dofs
    rhs = np.array(rhs, dtype=np.float64, copy=True)
    if value != 0.0:
        g = np.zeros(space.num_dofs)
        g[bd] = value
        rhs = rhs - A @ g
    mask = np.zeros(space.num_dofs, dtype=bool)
    mask[bd] = True
    A = A.tocoo()
    data = np.where(mask[A.row] | mask[A.col], 0.0, A.data)
    out = sp.coo_matrix((data, (A.row, A.col)), shape=A.shape).tocsr()
    out.eliminate_zeros()
    eye = sp.coo_matrix(
        (np.ones(len(bd)), (bd, bd)), shape=A.shape
    ).tocsr()
    rhs[bd] = value
    return out + eye, rhs


def l2_norm_sq(field: Field) -> float:
    """Squared L2 norm over the field's mesh, via the mass matrix."""
    M = field.space.mass_matrix()
    return float(field.coefficients @ (M @ field.coefficients))


# ---------------------------------------------------------------------------
# interpolation / evaluation

def interpolation_matrix(space: FunctionSpace, parent_cell: int, cell_coords):
    """Change of basis from a parent cell's basis to a sub-cell's basis.

    ``cell_coords`` is a (3, 2) triangle contained in the parent cell.  The
    returned matrix R has shape (n_sub_nodes, n_parent_basis) with
    R[s, i] = phi_i(x_s): parent basis i evaluated at the sub-cell's
    Lagrange node s, so a parent-local function with coefficients c is the
    sub-cell-local function with coefficients R @ c.
    """
    cell_coords = np.asarray(cell_coords, dtype=np.float64)
    nodes_ref = lagrange_nodes(space.degree)
    x = cell_coords[0] + nodes_ref @ np.stack(
        [cell_coords[1] - cell_coords[0], cell_coords[2] - cell_coords[0]]
    )
    pv = space.mesh.cell_coords(parent_cell)
    J = np.stack([pv[1] - pv[0], pv[2] - pv[0]], axis=1)
    xi = np.linalg.solve(J, (x - pv[0]).T).T
    bary_min = np.minimum(np.minimum(xi[:, 0], xi[:, 1]), 1.0 - xi.sum(axis=1))
    if bary_min.min() < -1e-10:
        raise FemError(
            f"sub-cell node outside parent cell {parent_cell} "
            f"(barycentric {bary_min.min():.3e})"
        )
    return tabulate(space.degree, xi)


def embedded_dof_map(outer_space: FunctionSpace, inner_space: FunctionSpace,
                     cell_map):
    """Outer-space dof index for every inner-space dof.

    ``cell_map`` sends inner cells to the outer cells they coincide with
    (an exact submesh, as produced by an embedded mesh pair).  Restricting
    a field is then ``u.coefficients[dof_map]``.  Requires equal degrees
    and vertex renumbering that preserves index order, so per-cell dof
    layouts agree; verified against dof coordinates.
    """
    if outer_space.degree != inner_space.degree:
        raise FemError("embedded restriction needs equal degrees")
    dof_map = np.full(inner_space.num_dofs, -1, dtype=np.int64)
    dof_map[inner_space.cell_dofs] = outer_space.cell_dofs[np.asarray(cell_map)]
    if not np.allclose(
        inner_space.dof_coords, outer_space.dof_coords[dof_map],
        rtol=0.0, atol=1e-12,
    ):
        raise FemError("inner and outer dof layouts disagree")
    return dof_map


def evaluation_matrix(space: FunctionSpace, points):
    """Sparse operator E with (E @ coefficients)[p] = value at points[p].

    Build once and reuse when many fields on the same space are evaluated
    at the same points.  Raises if a point is outside the mesh.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cells = space.locator().locate(points)
    if (cells < 0).any():
        raise FemError(f"point outside mesh: {points[cells < 0][0]}")
    pv = space.mesh.cell_coords(cells)
    J = np.stack([pv[:, 1] - pv[:, 0], pv[:, 2] - pv[:, 0]], axis=2)
    xi = np.linalg.solve(J, (points - pv[:, 0])[:, :, None])[:, :, 0]
    phi = tabulate(space.degree, xi)
    dofs = space.cell_dofs[cells]
    rows = np.repeat(np.arange(len(points)), dofs.shape[1])
    E = sp.coo_matrix(
        (phi.ravel(), (rows, dofs.ravel())), shape=(len(points), space.num_dofs)
    )
    return E.tocsr()


def evaluate_at_points(field: Field, points):
    """Point values of a field; raises if a point is outside the mesh."""
    return evaluation_matrix(field.space, points) @ field.coefficients


def save_field_csv(field: Field, path):
    """Write dof locations and coefficients as ``x,y,value`` CSV."""
    with open(path, "w") as fh:
        fh.write("x,y,value\n")
        for (x, y), v in zip(field.space.dof_coords, field.coefficients):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")
