"""Planar triangle meshes.

Provides structured criss-cross generation on axis-aligned boxes, uniform
red refinement, deterministic interior-vertex perturbation (for building
hierarchies whose levels are intentionally not nested), extraction of an
inner box mesh embedded in an outer one, mesh quality measures, a
plain-text file format, and a uniform background grid for point location
and bounding-box candidate queries.

Meshes are immutable once constructed: the vertex and cell arrays are
marked read-only and every operation returns a new ``Mesh``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import substream

__all__ = [
    "Mesh",
    "MeshError",
    "MeshHierarchy",
    "EmbeddedPair",
    "GridIndex",
    "generate_structured",
    "refine_uniform",
    "perturb_interior",
    "radius_ratios",
    "is_nested",
    "build_embedded_pair",
    "build_hierarchy",
    "save_mesh",
    "load_mesh",
]

# Relative tolerance used when comparing summed cell areas to a declared
# bounding box area.
AREA_RTOL = 1e-12


class MeshError(ValueError):
    """Invalid mesh data or a failed mesh operation."""


def _signed_areas(vertices, cells):
    v = vertices[cells]
    return 0.5 * (
        (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
        - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1])
    )


class Mesh:
    """A conforming triangle mesh with positively oriented cells.

    Parameters
    ----------
    vertices : (nv, 2) float array
    cells : (nc, 3) int array, counter-clockwise vertex triples
    domain : optional (x0, x1, y0, y1) bounding box the mesh tiles; when
        given, the summed cell area must match the box area.
    """

    def __init__(self, vertices, cells, domain=None):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        cells = np.ascontiguousarray(cells, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError(f"vertices must be (nv, 2), got {vertices.shape}")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError(f"cells must be (nc, 3), got {cells.shape}")
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell vertex index out of range")
        if (
            (cells[:, 0] == cells[:, 1])
            | (cells[:, 1] == cells[:, 2])
            | (cells[:, 0] == cells[:, 2])
        ).any():
            raise MeshError("cell with repeated vertex")
        signed = _signed_areas(vertices, cells)
        bad = np.flatnonzero(signed <= 0.0)
        if bad.size:
            raise MeshError(
                f"{bad.size} cells are degenerate or negatively oriented "
                f"(first: cell {bad[0]}, signed area {signed[bad[0]]:.3e})"
            )
        if domain is not None:
            x0, x1, y0, y1 = map(float, domain)
            if not (x1 > x0 and y1 > y0):
                raise MeshError(f"degenerate domain box {domain}")
            box_area = (x1 - x0) * (y1 - y0)
            if abs(signed.sum() - box_area) > AREA_RTOL * box_area * max(
                1.0, len(cells)
            ):
                raise MeshError(
                    f"cell areas sum to {signed.sum()!r}, domain area is {box_area!r}"
                )
            domain = (x0, x1, y0, y1)
        vertices.setflags(write=False)
        cells.setflags(write=False)
        self.vertices = vertices
        self.cells = cells
        self.domain = domain
        self.areas = signed
        self.areas.setflags(write=False)
        self._edge_cache = None

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    def cell_coords(self, idx=slice(None)):
        """Vertex coordinates of cells, shape (n, 3, 2)."""
        return self.vertices[self.cells[idx]]

    def _edges(self):
        """Unique edges and incidence, built once on first use.

        Returns (edges, cell_edges, counts): edges is (ne, 2) with each row
        sorted low-to-high, cell_edges is (nc, 3) mapping local edge k
        (between local vertices k and (k+1) % 3) to edge ids, counts is the
        number of cells sharing each edge.
        """
        if self._edge_cache is None:
            c = self.cells
            raw = np.concatenate(
                [c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]], axis=0
            )
            raw = np.sort(raw, axis=1)
            edges, inv, counts = np.unique(
                raw, axis=0, return_inverse=True, return_counts=True
            )
            cell_edges = inv.reshape(3, -1).T.copy()
            self._edge_cache = (edges, cell_edges, counts)
        return self._edge_cache

    @property
    def edges(self):
        return self._edges()[0]

    @property
    def cell_edges(self):
        return self._edges()[1]

    @property
    def boundary_edges(self):
        edges, _, counts = self._edges()
        return edges[counts == 1]

    @property
    def boundary_vertices(self):
        """Indices of vertices lying on the mesh boundary."""
        return np.unique(self.boundary_edges)

    @property
    def h_max(self):
        """Largest cell diameter (longest edge length)."""
        e = self.edges
        d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
        return float(np.sqrt((d * d).sum(axis=1)).max())

    def __repr__(self):
        return (
            f"Mesh(num_vertices={self.num_vertices}, num_cells={self.num_cells}, "
            f"domain={self.domain})"
        )


def generate_structured(nx: int, box=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Uniform criss-cross triangulation of an axis-aligned box.

    The box is split into an nx-by-nx grid of quads and each quad into two
    triangles along its lower-left to upper-right diagonal, giving 2*nx**2
    cells.
    """
    if nx < 1:
        raise MeshError(f"nx must be >= 1, got {nx}")
    x0, x1, y0, y1 = map(float, box)
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate box {box}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, nx + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(nx))
    i = i.ravel()
    j = j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.concatenate([lower, upper], axis=0)
    return Mesh(vertices, cells, domain=(x0, x1, y0, y1))


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: each triangle is split into four via edge midpoints.

    Parent vertices keep their indices (and exact coordinates), so the
    refined mesh is nested in the parent.
    """
    edges, cell_edges, _ = mesh._edges()
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid], axis=0)
    m = mesh.num_vertices + cell_edges  # global ids of midpoint vertices
    c = mesh.cells
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    children = np.concatenate(
        [
            np.column_stack([c[:, 0], m01, m20]),
            np.column_stack([c[:, 1], m12, m01]),
            np.column_stack([c[:, 2], m20, m12]),
            np.column_stack([m01, m12, m20]),
        ],
        axis=0,
    )
    return Mesh(vertices, children, domain=mesh.domain)


def _cell_quality(vertices, cells, areas):
    v = vertices[cells]
    a = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
    b = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
    c = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
    # 2 * (2 area / perimeter) / (abc / 4 area), guarded against area <= 0
    return 16.0 * np.maximum(areas, 0.0) ** 2 / ((a + b + c) * a * b * c)


def perturb_interior(
    mesh: Mesh, amplitude: float, seed: int, frozen_vertices=(), quality_floor=0.3
) -> Mesh:
    """Displace interior vertices by a deterministic pseudo-random offset.

    Each movable vertex is shifted by at most ``amplitude`` times the length
    of its shortest incident edge.  Boundary vertices (and any extra
    ``frozen_vertices``) stay put, so the mesh still tiles the same domain.
    Offsets that would flip a cell, or push its radius ratio below
    ``quality_floor`` (or below the cell's original ratio, whichever is
    smaller), are halved until every cell is acceptable; amplitude 0
    returns an identical mesh.
    """
    if not 0.0 <= amplitude < 0.5:
        raise MeshError(f"amplitude must be in [0, 0.5), got {amplitude}")
    nv = mesh.num_vertices
    movable = np.ones(nv, dtype=bool)
    movable[mesh.boundary_vertices] = False
    frozen_vertices = np.asarray(list(frozen_vertices), dtype=np.int64)
    if frozen_vertices.size:
        movable[frozen_vertices] = False

    edges = mesh.edges
    d = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    lengths = np.sqrt((d * d).sum(axis=1))
    min_len = np.full(nv, np.inf)
    np.minimum.at(min_len, edges[:, 0], lengths)
    np.minimum.at(min_len, edges[:, 1], lengths)

    rng = substream(seed)
    angle = rng.random(nv) * (2.0 * math.pi)
    radius = rng.random(nv) * amplitude * min_len
    offsets = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    offsets[~movable] = 0.0

    area_floor = 0.01 * mesh.areas
    rr_floor = np.minimum(
        quality_floor, _cell_quality(mesh.vertices, mesh.cells, mesh.areas)
    )
    for _ in range(32):
        candidate = mesh.vertices + offsets
        areas = _signed_areas(candidate, mesh.cells)
        rr = _cell_quality(candidate, mesh.cells, areas)
        bad = (areas <= area_floor) | (rr < rr_floor)
        if not bad.any():
            return Mesh(candidate, mesh.cells, domain=mesh.domain)
        shrink = np.unique(mesh.cells[bad])
        offsets[shrink] *= 0.5
    raise MeshError("could not find a valid perturbation (amplitude too large?)")


def radius_ratios(mesh: Mesh):
    """(min, max) over cells of the normalized inradius/circumradius ratio.

    The ratio is d * r_in / r_circ with d = 2, which is 1 for an
    equilateral triangle and tends to 0 for degenerate ones.
    """
    v = mesh.cell_coords()
    a = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
    b = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
    c = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
    area = mesh.areas
    r_in = 2.0 * area / (a + b + c)
    r_circ = a * b * c / (4.0 * area)
    ratio = 2.0 * r_in / r_circ
    return float(ratio.min()), float(ratio.max())


def _vertex_keys(vertices, decimals=12):
    rounded = np.round(vertices, decimals)
    # avoid distinct keys for -0.0 vs 0.0
    rounded += 0.0
    return {(row[0], row[1]): i for i, row in enumerate(rounded)}


def is_nested(coarse: Mesh, fine: Mesh, rtol=1e-10) -> bool:
    """Whether every coarse cell is exactly tiled by fine cells.

    Checks that the coarse vertices appear among the fine vertices and that
    the fine cells, grouped by the coarse cell containing their centroid,
    sum to each coarse cell's area.
    """
    if coarse is fine:
        return True
    fine_keys = _vertex_keys(fine.vertices)
    coarse_rounded = np.round(coarse.vertices, 12) + 0.0
    for row in coarse_rounded:
        if (row[0], row[1]) not in fine_keys:
            return False
    locator = GridIndex(coarse)
    centroids = fine.cell_coords().mean(axis=1)
    owner = locator.locate(centroids)
    if (owner < 0).any():
        return False
    covered = np.bincount(owner, weights=fine.areas, minlength=coarse.num_cells)
    return bool(np.allclose(covered, coarse.areas, rtol=rtol, atol=0.0))


@dataclass
class EmbeddedPair:
    """An outer box mesh and the mesh of an inner box cut from its cells.

    ``cell_map[i]`` is the outer cell index of inner cell ``i`` (the two
    triangles are identical, listed with the same vertex order);
    ``vertex_map[v]`` is the outer vertex index of inner vertex ``v``.
    """

    outer: Mesh
    inner: Mesh
    cell_map: np.ndarray
    vertex_map: np.ndarray


def _extract_submesh(mesh: Mesh, cell_idx, domain):
    cells = mesh.cells[cell_idx]
    used = np.unique(cells)
    renumber = np.full(mesh.num_vertices, -1, dtype=np.int64)
    renumber[used] = np.arange(len(used))
    inner = Mesh(mesh.vertices[used], renumber[cells], domain=domain)
    return inner, used


def build_embedded_pair(inner_box, outer_box, nx: int) -> EmbeddedPair:
    """Structured outer mesh whose cells exactly tile an inner box too.

    The inner box corners must lie on the outer lattice; otherwise this
    raises ``MeshError``.
    """
    outer = generate_structured(nx, box=outer_box)
    return _embed(outer, inner_box)


def _embed(outer: Mesh, inner_box) -> EmbeddedPair:
    gx0, gx1, gy0, gy1 = map(float, inner_box)
    x0, x1, y0, y1 = outer.domain
    if not (x0 <= gx0 < gx1 <= x1 and y0 <= gy0 < gy1 <= y1):
        raise MeshError(f"inner box {inner_box} not inside outer box {outer.domain}")
    centroids = outer.cell_coords().mean(axis=1)
    inside = (
        (centroids[:, 0] > gx0)
        & (centroids[:, 0] < gx1)
        & (centroids[:, 1] > gy0)
        & (centroids[:, 1] < gy1)
    )
    cell_idx = np.flatnonzero(inside)
    if not cell_idx.size:
        raise MeshError("no outer cells fall inside the inner box")
    try:
        inner, vertex_map = _extract_submesh(
            outer, cell_idx, (gx0, gx1, gy0, gy1)
        )
    except MeshError as err:
        raise MeshError(
            f"inner box {inner_box} is not aligned with the outer lattice: {err}"
        ) from err
    return EmbeddedPair(outer, inner, cell_idx, vertex_map)


def _on_box_boundary(vertices, box, tol=1e-12):
    x0, x1, y0, y1 = box
    x, y = vertices[:, 0], vertices[:, 1]
    inside_x = (x >= x0 - tol) & (x <= x1 + tol)
    inside_y = (y >= y0 - tol) & (y <= y1 + tol)
    on_edge = (
        (np.abs(x - x0) <= tol)
        | (np.abs(x - x1) <= tol)
        | (np.abs(y - y0) <= tol)
        | (np.abs(y - y1) <= tol)
    )
    return inside_x & inside_y & on_edge


@dataclass
class MeshHierarchy:
    """A refine-then-perturb cascade of meshes of an outer box, each level
    also embedding an inner box.

    Level 1 is structured with base_nx cells per axis.  Each further level
    refines the previous one and then perturbs the newly created edge
    midpoint vertices, so consecutive levels overlap heavily but are not
    nested.  Vertices inherited from the previous level and vertices on the
    inner box boundary stay fixed, so every level yields an exactly
    embedded inner mesh.
    """

    pairs: list
    amplitude: float
    seed: int

    @property
    def num_levels(self):
        return len(self.pairs)

    def outer(self, level) -> Mesh:
        return self.pairs[level - 1].outer

    def inner(self, level) -> Mesh:
        return self.pairs[level - 1].inner

    def pair(self, level) -> EmbeddedPair:
        return self.pairs[level - 1]

    def h(self, level) -> float:
        return self.outer(level).h_max


def build_hierarchy(
    num_levels: int,
    base_nx: int = 4,
    amplitude: float = 0.2,
    seed: int = 0,
    inner_box=(-0.5, 0.5, -0.5, 0.5),
    outer_box=(-1.0, 1.0, -1.0, 1.0),
) -> MeshHierarchy:
    """Build the standard non-nested hierarchy of embedded box meshes."""
    if num_levels < 1:
        raise MeshError("num_levels must be >= 1")
    outer = generate_structured(base_nx, box=outer_box)
    pairs = [_embed(outer, inner_box)]
    for level in range(2, num_levels + 1):
        refined = refine_uniform(outer)
        if amplitude > 0.0:
            frozen = np.concatenate(
                [
                    np.arange(outer.num_vertices),  # inherited vertices
                    np.flatnonzero(_on_box_boundary(refined.vertices, inner_box)),
                ]
            )
            # one derived seed per level so consecutive levels stay non-nested
            refined = perturb_interior(
                refined, amplitude, seed=seed + level, frozen_vertices=frozen
            )
        outer = refined
        pairs.append(_embed(outer, inner_box))
    return MeshHierarchy(pairs=pairs, amplitude=amplitude, seed=seed)


def save_mesh(mesh: Mesh, path):
    """Write a mesh as plain text.

    Format: a header line ``vertices N cells M``, then N ``x y`` lines,
    then M ``i j k b`` lines where b flags cells touching the boundary.
    """
    boundary_cells = np.zeros(mesh.num_cells, dtype=np.int64)
    _, cell_edges, counts = mesh._edges()
    boundary_cells[(counts[cell_edges] == 1).any(axis=1)] = 1
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.num_vertices} cells {mesh.num_cells}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for (i, j, k), b in zip(mesh.cells, boundary_cells):
            fh.write(f"{i} {j} {k} {b}\n")


def load_mesh(path, domain=None) -> Mesh:
    """Read a mesh written by :func:`save_mesh`.

    The boundary flag column is derived from topology on load, so it is
    read and ignored.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "vertices" or header[2] != "cells":
            raise MeshError(f"bad mesh header in {path}: {header}")
        nv, nc = int(header[1]), int(header[3])
        vertices = np.empty((nv, 2))
        for i in range(nv):
            parts = fh.readline().split()
            vertices[i] = (float(parts[0]), float(parts[1]))
        cells = np.empty((nc, 3), dtype=np.int64)
        for i in range(nc):
            parts = fh.readline().split()
            cells[i] = (int(parts[0]), int(parts[1]), int(parts[2]))
    return Mesh(vertices, cells, domain=domain)


class GridIndex:
    """Uniform background grid over a mesh for fast candidate queries.

    Buckets hold the indices of cells whose bounding box overlaps them;
    the grid resolution is chosen so a bucket holds O(1) cells for
    quasi-uniform meshes.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        coords = mesh.cell_coords()
        lo = coords.min(axis=1)  # (nc, 2) per-cell bbox corners
        hi = coords.max(axis=1)
        self.x0, self.y0 = mesh.vertices.min(axis=0)
        x1, y1 = mesh.vertices.max(axis=0)
        n = max(1, int(round(math.sqrt(mesh.num_cells / 2.0))))
        self.nx = self.ny = n
        self.dx = (x1 - self.x0) / n or 1.0
        self.dy = (y1 - self.y0) / n or 1.0
        ix0 = np.clip(((lo[:, 0] - self.x0) / self.dx).astype(int), 0, n - 1)
        ix1 = np.clip(((hi[:, 0] - self.x0) / self.dx).astype(int), 0, n - 1)
        iy0 = np.clip(((lo[:, 1] - self.y0) / self.dy).astype(int), 0, n - 1)
        iy1 = np.clip(((hi[:, 1] - self.y0) / self.dy).astype(int), 0, n - 1)
        self._ranges = (ix0, ix1, iy0, iy1)

        # ragged expansion of each cell's bucket rectangle
        wx = ix1 - ix0 + 1
        wy = iy1 - iy0 + 1
        reps = wx * wy
        total = int(reps.sum())
        cell_of = np.repeat(np.arange(mesh.num_cells), reps)
        offsets = np.arange(total) - np.repeat(np.cumsum(reps) - reps, reps)
        wx_r = np.repeat(wx, reps)
        bx = np.repeat(ix0, reps) + offsets % wx_r
        by = np.repeat(iy0, reps) + offsets // wx_r
        bucket = by * n + bx
        order = np.argsort(bucket, kind="stable")
        self._bucket_cells = cell_of[order]
        self._bucket_ptr = np.zeros(n * n + 1, dtype=np.int64)
        counts = np.bincount(bucket, minlength=n * n)
        np.cumsum(counts, out=self._bucket_ptr[1:])

    def query_bbox(self, xmin, xmax, ymin, ymax):
        """Cells whose bounding boxes may overlap the given box."""
        ix0 = min(max(int((xmin - self.x0) / self.dx), 0), self.nx - 1)
        ix1 = min(max(int((xmax - self.x0) / self.dx), 0), self.nx - 1)
        iy0 = min(max(int((ymin - self.y0) / self.dy), 0), self.ny - 1)
        iy1 = min(max(int((ymax - self.y0) / self.dy), 0), self.ny - 1)
        ptr, cells = self._bucket_ptr, self._bucket_cells
        chunks = [
            cells[ptr[b + ix0] : ptr[b + ix1 + 1]]
            for b in range(iy0 * self.nx, (iy1 + 1) * self.nx, self.nx)
        ]
        out = np.concatenate(chunks) if len(chunks) > 1 else chunks[0]
        return np.unique(out)

    def locate(self, points, tol=1e-12):
        """Index of a cell containing each point, or -1 if outside.

        Containment is barycentric with a small negative tolerance; among
        candidates the cell with the largest minimum barycentric coordinate
        wins, so points on shared edges resolve deterministically.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        verts = self.mesh.vertices
        cells = self.mesh.cells
        out = np.full(len(points), -1, dtype=np.int64)
        for n, (px, py) in enumerate(points):
            cand = self.query_bbox(px, px, py, py)
            best = -1
            best_min = -np.inf
            for c in cand:
                i, j, k = cells[c]
                ax, ay = verts[i]
                bx, by = verts[j]
                cx, cy = verts[k]
                det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
                l1 = ((bx - px) * (cy - py) - (cx - px) * (by - py)) / det
                l2 = ((cx - px) * (ay - py) - (ax - px) * (cy - py)) / det
                l3 = 1.0 - l1 - l2
                m = min(l1, l2, l3)
                if m >= -tol and m > best_min:
                    best = c
                    best_min = m
            out[n] = best
        return out
