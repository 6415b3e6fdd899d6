"""Sampling the action of white noise on finite element spaces.

A white-noise load vector b has entries b_i = <W, phi_i> that are jointly
Gaussian with zero mean and covariance equal to the mass matrix.  Because
the mass matrix is the assembly of cell-local masses, b can be sampled
without any global factorization: draw independent standard normals z_e per
cell, multiply by a local factor H_e with H_e H_e^T = M_e, and scatter into
the global vector.  On affine triangles M_e is the reference mass scaled by
|e| / |e_ref|, so a single Cholesky factor of the reference mass serves
every cell.

For a pair of spaces on different meshes of the same domain, the pair
(b_fine, b_coarse) must be jointly Gaussian with the mixed mass matrix as
cross-covariance for multilevel estimators to telescope.  This is achieved
by sampling per cell of a supermesh, where the restrictions of both parent
bases are polynomial:

* general variant: factor the fine-parent local mass oned supermesh cell
  and push z_e through the mixed local mass;
* affine variant: inject both parents' bases into the supermesh cell's own
  Lagrange basis (a change of basis by point evaluation) and reuse the
  scaled reference factor, sharing one z_e per supermesh cell.

Both produce the same law; the affine variant avoids per-cell
factorizations entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import (
    REFERENCE_AREA,
    FemError,
    FunctionSpace,
    lagrange_nodes,
    quadrature_rule,
    reference_mass_chol,
    tabulate,
)
from .rng import standard_normal
from .supermesh import Supermesh, SupermeshError, nested_supermesh_view

__all__ = [
    "NoiseVector",
    "CoupledNoisePair",
    "WhiteNoiseSampler",
    "CoupledWhiteNoiseSampler",
    "sample_independent",
    "sample_coupled_general",
    "sample_coupled_affine",
    "sample_coupled_nested",
    "assemble_mixed_mass",
    "local_mass_blocks",
]


@dataclass
class NoiseVector:
    """White-noise action on one space: covariance is its mass matrix."""

    space: FunctionSpace
    values: np.ndarray


@dataclass
class CoupledNoisePair:
    """Jointly sampled white-noise actions on a fine and a coarse space."""

    fine: NoiseVector
    coarse: NoiseVector


def _scatter(dofs, local, num_dofs):
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=num_dofs)


class WhiteNoiseSampler:
    """Samples b ~ N(0, M) for one space by per-cell reference factors."""

    def __init__(self, space: FunctionSpace):
        self.space = space
        self._H_ref = reference_mass_chol(space.degree)
        self._scale = np.sqrt(space.mesh.areas / REFERENCE_AREA)

    def sample(self, rng) -> NoiseVector:
        space = self.space
        z = standard_normal(rng, (space.mesh.num_cells, self._H_ref.shape[0]))
        local = (z @ self._H_ref.T) * self._scale[:, None]
        return NoiseVector(space, _scatter(space.cell_dofs, local, space.num_dofs))

    def sample_many(self, rng, count: int) -> np.ndarray:
        """Stacked samples, shape (count, num_dofs), drawn from one stream."""
        return np.stack([self.sample(rng).values for _ in range(count)])


def _parent_cells_and_refs(sm: Supermesh, space: FunctionSpace, points_ref):
    """Map reference points of every supermesh cell into parent reference
    coordinates.  Returns (parent cell ids, coords of shape (n, q, 2))."""
    parents = sm.parents_for(space.mesh)
    corners = sm.cells  # (n, 3, 2)
    E = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]],
                 axis=2)
    x = corners[:, None, 0, :] + np.einsum("nab,qb->nqa", E, points_ref)
    pv = space.mesh.cell_coords(parents)
    J = np.stack([pv[:, 1] - pv[:, 0], pv[:, 2] - pv[:, 0]], axis=2)
    Jinv = np.empty_like(J)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    Jinv[:, 0, 0] = J[:, 1, 1]
    Jinv[:, 0, 1] = -J[:, 0, 1]
    Jinv[:, 1, 0] = -J[:, 1, 0]
    Jinv[:, 1, 1] = J[:, 0, 0]
    Jinv /= det[:, None, None]
    xi = np.einsum("nab,nqb->nqa", Jinv, x - pv[:, None, 0, :])
    return parents, xi


def _check_containment(xi, tol=1e-10):
    bary_min = np.minimum(np.minimum(xi[..., 0], xi[..., 1]),
                          1.0 - xi[..., 0] - xi[..., 1])
    worst = bary_min.min()
    if worst < -tol:
        raise SupermeshError(
            f"supermesh cell node outside its parent (barycentric {worst:.3e})"
        )


def _tabulate_batch(degree, xi):
    n, q, _ = xi.shape
    return tabulate(degree, xi.reshape(n * q, 2)).reshape(n, q, -1)


def local_mass_blocks(fine_space, coarse_space, sm: Supermesh):
    """Per-supermesh-cell local mass blocks (M_fine, M_coarse, M_mixed).

    Blocks are integrals over the supermesh cell of products of parent
    basis restrictions: shapes (n, m_f, m_f), (n, m_c, m_c), (n, m_f, m_c).
    """
    degree = max(fine_space.degree, coarse_space.degree)
    pts, wts = quadrature_rule(2 * degree)
    _, xi_f = _parent_cells_and_refs(sm, fine_space, pts)
    _, xi_c = _parent_cells_and_refs(sm, coarse_space, pts)
    _check_containment(xi_f)
    _check_containment(xi_c)
    phi_f = _tabulate_batch(fine_space.degree, xi_f)
    phi_c = _tabulate_batch(coarse_space.degree, xi_c)
    scale = (sm.areas / REFERENCE_AREA)[:, None, None]
    M_f = np.einsum("q,nqi,nqj->nij", wts, phi_f, phi_f) * scale
    M_c = np.einsum("q,nqi,nqj->nij", wts, phi_c, phi_c) * scale
    M_fc = np.einsum("q,nqi,nqj->nij", wts, phi_f, phi_c) * scale
    return M_f, M_c, M_fc


class CoupledWhiteNoiseSampler:
    """Draws (b_fine, b_coarse) jointly so that multilevel differences
    telescope: marginals are N(0, M) on each space and the cross-covariance
    is the mixed mass matrix assembled on the supermesh.

    ``method`` selects the local construction: "affine" (change of basis to
    the supermesh cell's Lagrange basis, one reference factor for all
    cells) or "general" (per-cell Cholesky of the fine-parent local mass).
    """

    def __init__(self, fine_space, coarse_space, sm: Supermesh, method="affine"):
        if method not in ("affine", "general"):
            raise ValueError(f"unknown coupling method {method!r}")
        self.fine_space = fine_space
        self.coarse_space = coarse_space
        self.supermesh = sm
        self.method = method
        self._fine_dofs = fine_space.cell_dofs[sm.parents_for(fine_space.mesh)]
        self._coarse_dofs = coarse_space.cell_dofs[sm.parents_for(coarse_space.mesh)]

        if method == "affine":
            degree = max(fine_space.degree, coarse_space.degree)
            nodes = lagrange_nodes(degree)
            _, xi_f = _parent_cells_and_refs(sm, fine_space, nodes)
            _, xi_c = _parent_cells_and_refs(sm, coarse_space, nodes)
            _check_containment(xi_f)
            _check_containment(xi_c)
            # R[n, s, i] = (parent basis i)(supermesh node s)
            self._R_f = _tabulate_batch(fine_space.degree, xi_f)
            self._R_c = _tabulate_batch(coarse_space.degree, xi_c)
            self._H_ref = reference_mass_chol(degree)
            self._scale = np.sqrt(sm.areas / REFERENCE_AREA)
            self._z_len = self._H_ref.shape[0]
        else:
            M_f, _, M_fc = local_mass_blocks(fine_space, coarse_space, sm)
            self._H = _stable_cholesky(M_f)
            # b_coarse = M_fc^T H^{-T} z = (H^{-1} M_fc)^T z
            self._K = np.linalg.solve(self._H, M_fc)
            self._z_len = M_f.shape[1]

    def sample(self, rng) -> CoupledNoisePair:
        sm = self.supermesh
        z = standard_normal(rng, (sm.num_cells, self._z_len))
        if self.method == "affine":
            y = (z @ self._H_ref.T) * self._scale[:, None]
            local_f = np.einsum("nsi,ns->ni", self._R_f, y)
            local_c = np.einsum("nsi,ns->ni", self._R_c, y)
        else:
            local_f = np.einsum("nij,nj->ni", self._H, z)
            local_c = np.einsum("nji,nj->ni", self._K, z)
        b_f = _scatter(self._fine_dofs, local_f, self.fine_space.num_dofs)
        b_c = _scatter(self._coarse_dofs, local_c, self.coarse_space.num_dofs)
        return CoupledNoisePair(
            fine=NoiseVector(self.fine_space, b_f),
            coarse=NoiseVector(self.coarse_space, b_c),
        )

    def sample_many(self, rng, count: int):
        """Stacked (fine, coarse) samples: arrays (count, m_f), (count, m_c)."""
        fine, coarse = [], []
        for _ in range(count):
            pair = self.sample(rng)
            fine.append(pair.fine.values)
            coarse.append(pair.coarse.values)
        return np.stack(fine), np.stack(coarse)


def _stable_cholesky(M):
    """Batched Cholesky that reports which cell failed.

    A failure means a supermesh cell so thin that its fine-parent local
    mass is numerically singular; such cells should have been culled.
    """
    try:
        H = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as err:
        for n, block in enumerate(M):
            try:
                np.linalg.cholesky(block)
            except np.linalg.LinAlgError:
                raise SupermeshError(
                    f"degenerate supermesh cell {n}: local mass not positive "
                    "definite (sliver leaked through culling)"
                ) from err
        raise
    diag = np.einsum("nii->ni", H)
    floor = 1e-14 * np.einsum("nii->ni", M).max(axis=1, keepdims=True)
    if (diag * diag < floor).any():
        n = int(np.argmin((diag * diag - floor).min(axis=1)))
        raise SupermeshError(
            f"degenerate supermesh cell {n}: Cholesky pivot below tolerance"
        )
    return H


def sample_independent(space: FunctionSpace, rng) -> NoiseVector:
    """One white-noise draw on a single space."""
    return WhiteNoiseSampler(space).sample(rng)


def sample_coupled_general(fine_space, coarse_space, sm, rng) -> CoupledNoisePair:
    """One coupled draw via per-cell factorization of fine-parent masses."""
    return CoupledWhiteNoiseSampler(fine_space, coarse_space, sm, "general").sample(rng)


def sample_coupled_affine(fine_space, coarse_space, sm, rng) -> CoupledNoisePair:
    """One coupled draw via the supermesh-cell Lagrange change of basis."""
    return CoupledWhiteNoiseSampler(fine_space, coarse_space, sm, "affine").sample(rng)


def sample_coupled_nested(fine_space, coarse_space, rng) -> CoupledNoisePair:
    """Coupled draw when the coarse mesh is nested in the fine mesh (or both
    spaces share one mesh, as under degree refinement): the fine mesh itself
    is the supermesh, so no clipping is needed."""
    sm = nested_supermesh_view(coarse_space.mesh, fine_space.mesh)
    return CoupledWhiteNoiseSampler(fine_space, coarse_space, sm, "affine").sample(rng)


def assemble_mixed_mass(fine_space, coarse_space, sm: Supermesh):
    """Global mixed mass M_ij = integral of phi_i^fine phi_j^coarse, CSR.

    Assembled cell by cell on the supermesh, where both factors are
    polynomial; this is the cross-covariance a coupled sampler must have.
    """
    _, _, M_fc = local_mass_blocks(fine_space, coarse_space, sm)
    fine_dofs = fine_space.cell_dofs[sm.parents_for(fine_space.mesh)]
    coarse_dofs = coarse_space.cell_dofs[sm.parents_for(coarse_space.mesh)]
    m_f = fine_dofs.shape[1]
    m_c = coarse_dofs.shape[1]
    rows = np.repeat(fine_dofs, m_c, axis=1)
    cols = np.tile(coarse_dofs, (1, m_f))
    A = sp.coo_matrix(
        (M_fc.ravel(), (rows.ravel(), cols.ravel())),
        shape=(fine_space.num_dofs, coarse_space.num_dofs),
    )
    return A.tocsr()
