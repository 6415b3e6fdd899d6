"""Common refinements of triangle mesh pairs.

A supermesh of meshes A and B tiling the same domain is a set of triangles
such that every one lies inside exactly one cell of A and one cell of B,
and the triangles partition the domain.  It is built cell by cell: for
each cell of A, candidate overlapping cells of B come from a uniform
background grid, each candidate pair is clipped (convex polygon clipping),
and the clipped polygon is fan-triangulated.  Slivers below a relative
area threshold are culled.

All geometry is plain floating point with epsilon tolerances; there are no
exact predicates.  For nested pairs the fine mesh is already a supermesh,
so a cheap view is provided instead of clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import GridIndex, Mesh, MeshError, is_nested

__all__ = [
    "Supermesh",
    "SupermeshError",
    "build_supermesh",
    "nested_supermesh_view",
    "clip_triangles",
    "save_supermesh",
]

# Fraction of the smaller parent area below which a clipped triangle is
# considered a sliver and dropped.
AREA_EPSILON = 1e-12

# Total-area agreement required between the supermesh and its parents.
TOTAL_AREA_RTOL = 1e-10


class SupermeshError(RuntimeError):
    """Supermesh construction failed or produced an inconsistent cover."""


@dataclass
class Supermesh:
    """Triangles covering the domain, each tagged with its parent cells.

    ``cells`` holds vertex coordinates directly, shape (n, 3, 2); the
    parents of cell i are ``parent_a[i]`` in ``mesh_a`` and
    ``parent_b[i]`` in ``mesh_b``.
    """

    mesh_a: Mesh
    mesh_b: Mesh
    cells: np.ndarray
    parent_a: np.ndarray
    parent_b: np.ndarray
    areas: np.ndarray

    @property
    def num_cells(self):
        return len(self.cells)

    def parents_for(self, mesh: Mesh):
        """Parent indices for whichever side ``mesh`` is (identity match)."""
        if mesh is self.mesh_a:
            return self.parent_a
        if mesh is self.mesh_b:
            return self.parent_b
        raise SupermeshError("mesh is not a parent of this supermesh")

    def __repr__(self):
        return (
            f"Supermesh(num_cells={self.num_cells}, "
            f"a={self.mesh_a.num_cells}, b={self.mesh_b.num_cells})"
        )


def _clip_convex(subject, cx, cy):
    """Sutherland-Hodgman clip of polygon ``subject`` against the CCW
    triangle with vertex arrays cx, cy.  Points are (x, y) tuples."""
    for k in range(3):
        ax, ay = cx[k], cy[k]
        ex, ey = cx[(k + 1) % 3] - ax, cy[(k + 1) % 3] - ay
        output = []
        n = len(subject)
        if n == 0:
            return output
        px, py = subject[-1]
        p_in = ex * (py - ay) - ey * (px - ax) >= 0.0
        for qx, qy in subject:
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0.0
            if q_in != p_in:
                # parameter of the crossing along segment p -> q
                num = ey * (px - ax) - ex * (py - ay)
                den = ex * (qy - py) - ey * (qx - px)
                t = num / den
                output.append((px + t * (qx - px), py + t * (qy - py)))
            if q_in:
                output.append((qx, qy))
            px, py, p_in = qx, qy, q_in
        subject = output
    return subject


def clip_triangles(tri_a, tri_b):
    """Fan triangulation of the intersection of two CCW triangles.

    Returns a list of ((3, 2) coords, area) with positive areas only.
    """
    sub = [(tri_a[0, 0], tri_a[0, 1]), (tri_a[1, 0], tri_a[1, 1]),
           (tri_a[2, 0], tri_a[2, 1])]
    poly = _clip_convex(sub, tri_b[:, 0], tri_b[:, 1])
    out = []
    if len(poly) < 3:
        return out
    x0, y0 = poly[0]
    for k in range(1, len(poly) - 1):
        x1, y1 = poly[k]
        x2, y2 = poly[k + 1]
        area = 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
        if area > 0.0:
            out.append((((x0, y0), (x1, y1), (x2, y2)), area))
    return out


def build_supermesh(mesh_a: Mesh, mesh_b: Mesh) -> Supermesh:
    """Build the supermesh of two meshes tiling the same domain."""
    total_a = mesh_a.areas.sum()
    total_b = mesh_b.areas.sum()
    if abs(total_a - total_b) > TOTAL_AREA_RTOL * max(total_a, total_b):
        raise SupermeshError(
            f"meshes tile different areas: {total_a!r} vs {total_b!r}"
        )
    index_b = GridIndex(mesh_b)
    coords_a = mesh_a.cell_coords()
    coords_b = mesh_b.cell_coords()
    areas_a = mesh_a.areas
    areas_b = mesh_b.areas

    cells, pa, pb, areas = [], [], [], []
    for ia in range(mesh_a.num_cells):
        tri_a = coords_a[ia]
        xs, ys = tri_a[:, 0], tri_a[:, 1]
        cand = index_b.query_bbox(xs.min(), xs.max(), ys.min(), ys.max())
        for ib in cand:
            pieces = clip_triangles(tri_a, coords_b[ib])
            if not pieces:
                continue
            cull = AREA_EPSILON * min(areas_a[ia], areas_b[ib])
            for tri, area in pieces:
                if area > cull:
                    cells.append(tri)
                    pa.append(ia)
                    pb.append(ib)
                    areas.append(area)

    cells = np.asarray(cells)
    areas = np.asarray(areas)
    covered = areas.sum()
    if abs(covered - total_a) > TOTAL_AREA_RTOL * total_a:
        raise SupermeshError(
            f"supermesh covers area {covered!r}, parents tile {total_a!r}"
        )
    return Supermesh(
        mesh_a=mesh_a,
        mesh_b=mesh_b,
        cells=cells,
        parent_a=np.asarray(pa, dtype=np.int64),
        parent_b=np.asarray(pb, dtype=np.int64),
        areas=areas,
    )


def nested_supermesh_view(coarse: Mesh, fine: Mesh) -> Supermesh:
    """The fine mesh of a nested pair, viewed as a supermesh.

    ``parent_b`` is the identity into the fine mesh; ``parent_a`` locates
    each fine cell's centroid in the coarse mesh.  For a mesh paired with
    itself, both parent maps are the identity.
    """
    n = fine.num_cells
    identity = np.arange(n, dtype=np.int64)
    if coarse is fine:
        parent_a = identity
    else:
        if not is_nested(coarse, fine):
            raise SupermeshError("meshes are not nested")
        centroids = fine.cell_coords().mean(axis=1)
        parent_a = GridIndex(coarse).locate(centroids)
        if (parent_a < 0).any():
            raise SupermeshError("fine cell centroid outside the coarse mesh")
    return Supermesh(
        mesh_a=coarse,
        mesh_b=fine,
        cells=fine.cell_coords().copy(),
        parent_a=parent_a,
        parent_b=identity,
        areas=fine.areas.copy(),
    )


def save_supermesh(sm: Supermesh, mesh_path, pairs_path):
    """Write the supermesh as a mesh text file plus parent-pair lines.

    Coordinates are deduplicated (to 12 decimals) to form a vertex list;
    the companion file has one ``a b`` line per supermesh cell.
    """
    flat = sm.cells.reshape(-1, 2)
    keys = np.round(flat, 12) + 0.0
    _, first, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    vertices = flat[first]
    cells = inverse.reshape(-1, 3)
    from .mesh import save_mesh

    save_mesh(Mesh(vertices, cells), mesh_path)
    with open(pairs_path, "w") as fh:
        for a, b in zip(sm.parent_a, sm.parent_b):
            fh.write(f"{a} {b}\n")
