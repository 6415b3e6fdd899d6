import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maternmlmc.mesh import (
    generate_structured,
    perturb_interior,
    refine_uniform,
)
from maternmlmc.supermesh import (
    SupermeshError,
    build_supermesh,
    clip_triangles,
    nested_supermesh_view,
)

BOX = (-1.0, 1.0, -1.0, 1.0)


def tri(*pts):
    return np.asarray(pts, dtype=np.float64)


def clip_area(a, b):
    return sum(area for _, area in clip_triangles(a, b))


def test_clip_identical_triangles():
    t = tri((0, 0), (1, 0), (0, 1))
    assert clip_area(t, t) == pytest.approx(0.5, rel=1e-14)


def test_clip_disjoint_triangles():
    a = tri((0, 0), (1, 0), (0, 1))
    b = tri((5, 5), (6, 5), (5, 6))
    assert clip_triangles(a, b) == []


def test_clip_half_overlap_square_diagonals():
    # halves of the unit square cut along the two different diagonals:
    # {x >= y} and {x + y >= 1} meet in the triangle (1,0),(1,1),(.5,.5)
    a = tri((0, 0), (1, 0), (1, 1))
    b = tri((1, 0), (1, 1), (0, 1))
    assert clip_area(a, b) == pytest.approx(0.25, rel=1e-12)


def test_clip_contained_triangle():
    outer = tri((0, 0), (4, 0), (0, 4))
    inner = tri((1, 1), (2, 1), (1, 2))
    assert clip_area(outer, inner) == pytest.approx(0.5, rel=1e-12)
    assert clip_area(inner, outer) == pytest.approx(0.5, rel=1e-12)


def test_clip_known_offset_overlap():
    # right triangle shifted by (0.5, 0): intersection computed by hand,
    # a triangle with vertices (0.5,0),(1,0),(0.5,0.5)
    a = tri((0, 0), (1, 0), (0, 1))
    b = tri((0.5, 0), (1.5, 0), (0.5, 1))
    assert clip_area(a, b) == pytest.approx(0.125, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=-2.0, max_value=2.0), min_size=12, max_size=12))
def test_clip_bounded_by_parent_areas(coords):
    pts = np.asarray(coords).reshape(6, 2)
    a, b = pts[:3], pts[3:]
    def signed(t):
        u, v = t[1] - t[0], t[2] - t[0]
        return 0.5 * (u[0] * v[1] - u[1] * v[0])
    # orient both CCW, skip degenerate draws
    if abs(signed(a)) < 1e-3 or abs(signed(b)) < 1e-3:
        return
    if signed(a) < 0:
        a = a[::-1]
    if signed(b) < 0:
        b = b[::-1]
    area = clip_area(a, b)
    assert area >= 0.0
    assert area <= min(signed(a) if signed(a) > 0 else -signed(a),
                       signed(b) if signed(b) > 0 else -signed(b)) + 1e-12


def nonnested_pair():
    coarse = generate_structured(8, box=BOX)
    fine = perturb_interior(refine_uniform(coarse), 0.2, seed=1)
    return fine, coarse


def test_supermesh_conserves_area_exactly():
    fine, coarse = nonnested_pair()
    sm = build_supermesh(fine, coarse)
    assert sm.areas.sum() == pytest.approx(4.0, rel=1e-12)
    assert (sm.areas > 0).all()


def test_supermesh_cells_lie_in_both_parents():
    fine, coarse = nonnested_pair()
    sm = build_supermesh(fine, coarse)
    for mesh, parents in ((fine, sm.parent_a), (coarse, sm.parent_b)):
        tris = mesh.cell_coords()[parents]           # (n, 3, 2)
        # barycentric coordinates of every supermesh vertex in its parent
        v0 = tris[:, 0][:, None, :]
        d1 = (tris[:, 1] - tris[:, 0])[:, None, :]
        d2 = (tris[:, 2] - tris[:, 0])[:, None, :]
        rel = sm.cells - v0
        det = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        l1 = (rel[..., 0] * d2[..., 1] - rel[..., 1] * d2[..., 0]) / det
        l2 = (d1[..., 0] * rel[..., 1] - d1[..., 1] * rel[..., 0]) / det
        assert l1.min() > -1e-9 and l2.min() > -1e-9
        assert (l1 + l2).max() < 1.0 + 1e-9


def test_supermesh_partitions_each_parent_cell():
    fine, coarse = nonnested_pair()
    sm = build_supermesh(fine, coarse)
    for mesh, parents in ((fine, sm.parent_a), (coarse, sm.parent_b)):
        covered = np.bincount(parents, weights=sm.areas,
                              minlength=mesh.num_cells)
        assert np.allclose(covered, mesh.areas, rtol=1e-10)


def test_supermesh_size_bound_on_hierarchy_pair():
    # quasi-uniform non-nested pair from the standard cascade: the
    # supermesh stays a small multiple of the fine mesh
    from maternmlmc.mesh import build_hierarchy

    hier = build_hierarchy(num_levels=3)
    sm = build_supermesh(hier.outer(3), hier.outer(2))
    assert sm.num_cells / hier.outer(3).num_cells <= 4.0


def test_parents_for_rejects_foreign_mesh():
    fine, coarse = nonnested_pair()
    sm = build_supermesh(fine, coarse)
    with pytest.raises(SupermeshError):
        sm.parents_for(generate_structured(2, box=BOX))


def test_rejects_meshes_of_different_area():
    a = generate_structured(4, box=BOX)
    b = generate_structured(4, box=(0.0, 1.0, 0.0, 1.0))
    with pytest.raises(SupermeshError):
        build_supermesh(a, b)


def test_nested_view_matches_general_build():
    coarse = generate_structured(4, box=BOX)
    fine = refine_uniform(coarse)
    view = nested_supermesh_view(coarse, fine)
    general = build_supermesh(fine, coarse)
    assert view.areas.sum() == pytest.approx(4.0, rel=1e-14)
    # nested view: supermesh cells are exactly the fine cells
    assert view.num_cells == fine.num_cells
    # general path finds the same per-parent coverage, possibly split finer
    cov_view = np.bincount(view.parents_for(coarse), weights=view.areas,
                           minlength=coarse.num_cells)
    cov_gen = np.bincount(general.parent_b, weights=general.areas,
                          minlength=coarse.num_cells)
    assert np.allclose(cov_view, cov_gen, rtol=1e-10)
