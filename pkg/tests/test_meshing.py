from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracsobolev.errors import MeshError, ValidationError
from fracsobolev.geometry import DomainSpec, contains_points, slit_domain, unit_square
from fracsobolev.meshing import (feature_size, lagrange_partition, mesh_quality, read_mesh, refine,
                                 snowflake_partition, triangulate, write_mesh)
from fracsobolev.snowflake import SnowflakePlan, snowflake_domain

SQ = unit_square()
SLIT = slit_domain()


def _heron_inradius(t):
    a = np.linalg.norm(t[:, 1] - t[:, 2], axis=1)
    b = np.linalg.norm(t[:, 0] - t[:, 2], axis=1)
    c = np.linalg.norm(t[:, 0] - t[:, 1], axis=1)
    s = (a + b + c) / 2
    area = np.sqrt(s * (s - a) * (s - b) * (s - c))
    return area / s, a * b * c / (4 * area)


def _sample(domain, n, seed=0):
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = domain.bbox
    pts = rng.uniform([xmin, ymin], [xmax, ymax], size=(3 * n, 2))
    return pts[contains_points(domain, pts)][:n]


def test_structured_square_half():
    m = triangulate(SQ, 0.5, scheme="structured")
    assert (m.n_vertices, m.n_triangles) == (9, 8)
    r_in, r_out = _heron_inradius(m.tri_vertices)
    inr, circ, overlap = mesh_quality(m)
    assert circ == pytest.approx(math.sqrt(2) / 2, rel=1e-12)
    assert circ == pytest.approx(r_out.max() / 0.5, rel=1e-12)
    # legs 1/2: incircle radius (a + b - c) / 2
    assert inr == pytest.approx((1 - math.sqrt(2) / 2) / 2 / 0.5, rel=1e-12)
    assert inr == pytest.approx(r_in.min() / 0.5, rel=1e-12)
    assert overlap == 3


def test_scale_too_large_is_refused():
    with pytest.raises(MeshError, match="scale exceeds feature size"):
        triangulate(SQ, 2.0)


def test_feature_size_ignores_touching_slit():
    size, _ = feature_size(SLIT)
    assert size == pytest.approx(1.0)


def test_slit_vertices_are_duplicated():
    m = triangulate(SLIT, 0.25)
    v = m.vertices
    # the far endpoint (1, 0) separates the two sides too, so it is split as well
    on_slit = (np.abs(v[:, 1]) < 1e-12) & (v[:, 0] > 1e-12)
    xs = np.round(v[on_slit, 0], 12)
    uniq, counts = np.unique(xs, return_counts=True)
    assert uniq.tolist() == [0.25, 0.5, 0.75, 1.0] and (counts == 2).all()
    tags = m.side_tags[on_slit]
    assert sorted(set(tags.tolist())) == [-1, 1]
    tip = np.flatnonzero(np.hypot(v[:, 0], v[:, 1]) < 1e-12)
    assert len(tip) == 1
    assert len(m.dup_pairs) == len(uniq)


def test_slit_side_separation():
    m = triangulate(SLIT, 0.25)
    pu = lagrange_partition(m)
    for i, j in m.dup_pairs:
        assert not set(pu.star(i)) & set(pu.star(j))
        up = i if m.side_tags[i] > 0 else j
        x = m.vertices[up]
        val, _, _ = pu.evaluate(np.array([[x[0], -1e-6], [x[0], 1e-6]]))
        assert val[0, up] == 0.0
        assert val[1, up] > 0.99


def test_center_patch():
    m = triangulate(SQ, 0.5, scheme="structured")
    pu = lagrange_partition(m)
    c = int(np.flatnonzero(np.all(np.isclose(m.vertices, 0.5), axis=1))[0])
    touching = np.flatnonzero(np.any(m.triangles == c, axis=1))
    assert sorted(pu.star(c).tolist()) == sorted(touching.tolist())
    val, _, _ = pu.evaluate(np.array([[0.5, 0.5]]))
    assert val[0, c] == pytest.approx(1.0)


@pytest.mark.parametrize("domain, ell", [(SQ, 0.125), (SLIT, 0.25),
                                         (DomainSpec.from_lists([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]]), 0.2)])
def test_partition_of_unity(domain, ell):
    m = triangulate(domain, ell)
    pu = lagrange_partition(m)
    pts = _sample(domain, 4000)
    val, gx, gy = pu.evaluate(pts)
    assert np.abs(np.asarray(val.sum(1)).ravel() - 1).max() <= 1e-12
    assert np.abs(np.asarray(gx.sum(1)).ravel()).max() <= 1e-9
    assert val.min() >= -1e-12 and val.max() <= 1 + 1e-12
    assert pu.overlap(pts[:500]).max() == 3


def test_john_balls_inside_patches():
    m = triangulate(SLIT, 0.25)
    pu = lagrange_partition(m)
    rng = np.random.default_rng(2)
    for j in range(pu.n_functions):
        r = pu.john_radii[j] * np.sqrt(rng.random(30)) * 0.999
        phi = rng.uniform(0, 2 * np.pi, 30)
        pts = pu.john_centers[j] + r[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
        tri, _ = m.locator.locate(pts)
        assert np.isin(tri, pu.star(j)).all()
    assert pu.john_radii.min() / 0.25 > 0.1


def test_refine_preserves_area_and_unity():
    m = triangulate(SLIT, 0.5)
    r = refine(m)
    assert r.n_triangles == 4 * m.n_triangles
    assert r.areas.sum() == pytest.approx(m.areas.sum(), rel=1e-14)
    pu = lagrange_partition(r)
    val, _, _ = pu.evaluate(_sample(SLIT, 500, 4))
    assert np.abs(np.asarray(val.sum(1)).ravel() - 1).max() <= 1e-12


def test_mesh_file_roundtrip(tmp_path):
    m = triangulate(SLIT, 0.5)
    write_mesh(m, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.dup_pairs, m.dup_pairs)
    assert np.array_equal(back.side_tags, m.side_tags)
    assert back.target_scale == m.target_scale


def test_mesh_file_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("v 0 0\nq 1 2 3\n")
    with pytest.raises(ValidationError, match="line 2"):
        read_mesh(tmp_path / "bad.txt")


def test_straight_snowflake_partition_is_lagrange():
    sd = snowflake_domain(SnowflakePlan.uniform(0.3, "straight", 3))
    mesh, pu = snowflake_partition(sd, 0.25)
    assert len(pu.tents) == 0
    lag = lagrange_partition(mesh)
    pts = _sample(sd.domain, 500)
    assert (pu.evaluate(pts)[0] != lag.evaluate(pts)[0]).nnz == 0


def test_snowflake_partition_bump():
    sd = snowflake_domain(SnowflakePlan.uniform(0.3, "bump", 4))
    mesh, pu = snowflake_partition(sd, 0.09)
    assert pu.N == 2
    pts = _sample(sd.domain, 6000, 5)
    val, _, _ = pu.evaluate(pts)
    assert np.abs(np.asarray(val.sum(1)).ravel() - 1).max() <= 1e-12
    assert val.min() >= -1e-12
    assert pu.overlap(pts).max() <= 6
    diam = pu.patch_diameters() / 0.09
    # patch diameters comparable to the scale; the spread C / c is reported by the CLI
    assert 0.5 < diam.min() and diam.max() < 6


def test_snowflake_plan_too_shallow():
    sd = snowflake_domain(SnowflakePlan.uniform(0.3, "bump", 1))
    with pytest.raises(ValidationError, match="plan too shallow"):
        snowflake_partition(sd, 0.01)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([0.5, 0.25, 0.125]), st.floats(0, 1), st.floats(0, 1))
def test_unity_at_arbitrary_points(ell, a, b):
    pu = lagrange_partition(triangulate(SQ, ell))
    pt = np.array([[min(max(a, 1e-9), 1 - 1e-9), min(max(b, 1e-9), 1 - 1e-9)]])
    assert abs(pu.evaluate(pt)[0].sum() - 1) <= 1e-12
