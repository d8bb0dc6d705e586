from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from cutfem_mf.geometry import Complement, Plane, Sphere, Union
from cutfem_mf.quadrature import (TensorQuadrature, generate_cut_face_quadrature,
                                  generate_cut_volume_quadrature, generate_surface_quadrature,
                                  gauss_rule, write_rules_csv)

UNIT = (np.zeros(3), np.ones(3))
X = np.array([1.0, 0.0, 0.0])


# -- oracle: exact monomial moments of a clipped cube ------------------------------------------------

def _clipped_cube_vertices(normal, offset):
    """Vertices of ``[0,1]^3 cap {n.x < c}`` (a convex polytope)."""
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    phi = corners @ normal - offset
    verts = list(corners[phi <= 0])
    for i, j in itertools.combinations(range(8), 2):
        if np.sum(corners[i] != corners[j]) == 1 and phi[i] * phi[j] < 0:
            t = phi[i] / (phi[i] - phi[j])
            verts.append(corners[i] + t * (corners[j] - corners[i]))
    return np.array(verts)


def _simplex_rule(n=12):
    """Collapsed Gauss rule on the simplex ``0 <= z <= y <= x <= 1`` (Jacobian ``u^2 v``)."""
    g, w = np.polynomial.legendre.leggauss(n)
    g, w = 0.5 * (g + 1), 0.5 * w
    u, v, s = np.meshgrid(g, g, g, indexing="ij")
    wt = np.einsum("i,j,k->ijk", w, w, w) * u ** 2 * v
    pts = np.stack([u, u * v, u * v * s], axis=-1).reshape(-1, 3)
    return pts, wt.ravel()


def polytope_moment(verts, a, b, c):
    ref, w = _simplex_rule()
    tri = Delaunay(verts)
    total = 0.0
    for simplex in tri.simplices:
        A, B, C, D = verts[simplex]
        # x(1,0,0)=B, x(1,1,0)=C, x(1,1,1)=D
        pts = A + ref[:, :1] * (B - A) + ref[:, 1:2] * (C - B) + ref[:, 2:] * (D - C)
        jac = abs(np.linalg.det(np.stack([B - A, C - B, D - C])))
        total += jac * float(np.sum(w * pts[:, 0] ** a * pts[:, 1] ** b * pts[:, 2] ** c))
    return total


def test_polytope_oracle_on_known_shapes():
    verts = _clipped_cube_vertices(X, 0.5)
    assert polytope_moment(verts, 0, 0, 0) == pytest.approx(0.5, abs=1e-14)
    # int_0^0.5 x^2 dx = 1/24
    assert polytope_moment(verts, 2, 0, 0) == pytest.approx(1 / 24, abs=1e-14)
    corner = _clipped_cube_vertices(np.ones(3) / math.sqrt(3), 1 / math.sqrt(3))
    assert polytope_moment(corner, 0, 0, 0) == pytest.approx(1 / 6, abs=1e-14)


# -- 1D rules ---------------------------------------------------------------------------------------------

def test_two_point_gauss_rule():
    r = gauss_rule(2)
    np.testing.assert_allclose(r.points, [(3 - math.sqrt(3)) / 6, (3 + math.sqrt(3)) / 6], atol=1e-15)
    np.testing.assert_allclose(r.weights, [0.5, 0.5], atol=1e-15)
    assert float(np.sum(r.weights * r.points ** 3)) == pytest.approx(0.25, abs=1e-16)


def test_one_point_gauss_rule():
    r = gauss_rule(1)
    assert r.points.tolist() == [0.5] and r.weights.tolist() == [1.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.data())
def test_gauss_rule_exact_to_degree_2n_minus_1(n, data):
    m = data.draw(st.integers(0, 2 * n - 1))
    r = gauss_rule(n)
    assert abs(float(np.sum(r.weights * r.points ** m)) - 1 / (m + 1)) <= 1e-14


def test_tensor_rule_is_x_fastest():
    t = TensorQuadrature(gauss_rule(2), 3)
    assert np.all(t.points[1, 1:] == t.points[0, 1:]) and t.points[1, 0] > t.points[0, 0]
    assert t.weights.sum() == pytest.approx(1.0, abs=1e-15)


# -- cut volume rules -------------------------------------------------------------------------------------

def test_plane_half_cell_volume():
    q = generate_cut_volume_quadrature(Plane(X, 0.5), *UNIT, 3)
    assert abs(q.weights.sum() - 0.5) <= 1e-14


def test_untouched_cell_is_rejected():
    with pytest.raises(ValueError):
        generate_cut_volume_quadrature(Plane(X, 5.0), *UNIT, 3)
    with pytest.raises(ValueError):
        generate_surface_quadrature(Plane(X, 5.0), *UNIT, 3)


tilted_planes = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
                          st.floats(0.05, 0.95)).filter(lambda t: np.linalg.norm(t[:3]) > 0.2)


@settings(max_examples=25, deadline=None)
@given(tilted_planes, st.integers(2, 4))
def test_affine_cut_moments_match_polytope(plane, n_q):
    n = np.array(plane[:3]) / np.linalg.norm(plane[:3])
    # put the plane through a random point of the cell so it is always cut
    offset = float(n @ np.full(3, plane[3]))
    q = generate_cut_volume_quadrature(Plane(n, offset), *UNIT, n_q)
    verts = _clipped_cube_vertices(n, offset)
    top = 2 * n_q - 3  # total degree integrated exactly after three height reductions
    for a, b, c in itertools.product(range(top + 1), repeat=3):
        if a + b + c > top:
            continue
        got = float(np.sum(q.weights * q.points[:, 0] ** a * q.points[:, 1] ** b * q.points[:, 2] ** c))
        assert abs(got - polytope_moment(verts, a, b, c)) <= 1e-10


cells = st.tuples(st.floats(-1.2, 0.8), st.floats(-1.2, 0.8), st.floats(-1.2, 0.8),
                  st.floats(0.05, 0.4))
spheres = st.tuples(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
                    st.floats(0.2, 1.0))


def _cut_case(cell, sph):
    lo = np.array(cell[:3])
    hi = lo + cell[3]
    ls = Sphere(np.array(sph[:3]), sph[3])
    fmin, fmax = ls.bounds(lo, hi)
    return ls, lo, hi, fmin <= 0 <= fmax


@settings(max_examples=40, deadline=None)
@given(cells, spheres, st.integers(1, 4))
def test_rules_are_positive_and_inside_cell(cell, sph, n_q):
    ls, lo, hi, cut = _cut_case(cell, sph)
    if not cut:
        return
    for q in (generate_cut_volume_quadrature(ls, lo, hi, n_q),
              generate_surface_quadrature(ls, lo, hi, n_q)):
        assert np.all(q.weights > 0)
        assert np.all((q.points >= 0) & (q.points <= 1))


@settings(max_examples=40, deadline=None)
@given(cells, spheres, st.integers(1, 4))
def test_surface_points_lie_on_interface(cell, sph, n_q):
    ls, lo, hi, cut = _cut_case(cell, sph)
    if not cut:
        return
    q = generate_surface_quadrature(ls, lo, hi, n_q)
    x = lo + q.points * (hi - lo)
    assert np.all(np.abs(ls(x)) < 1e-10 * cell[3])
    np.testing.assert_allclose(np.linalg.norm(q.normals, axis=1), 1.0, atol=1e-12)
    g = ls.gradient(x)
    np.testing.assert_allclose(q.normals, g / np.linalg.norm(g, axis=1, keepdims=True), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(cells, spheres, st.integers(1, 4))
def test_complement_identity(cell, sph, n_q):
    ls, lo, hi, cut = _cut_case(cell, sph)
    if not cut:
        return
    inside = generate_cut_volume_quadrature(ls, lo, hi, n_q).weights.sum()
    outside = generate_cut_volume_quadrature(Complement(ls), lo, hi, n_q).weights.sum()
    vol = float(np.prod(hi - lo))
    assert abs(inside + outside - vol) <= 1e-12 * vol


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.1, 0.9), min_size=3, max_size=3), st.floats(0.2, 0.6),
       st.lists(st.floats(-0.4, 0.4), min_size=3, max_size=3), st.integers(2, 4))
def test_complement_identity_through_a_union_kink(c, r, shift, n_q):
    # two overlapping spheres whose intersection curve tends to cross the unit cell
    s1 = Sphere(np.array(c), r)
    s2 = Sphere(np.array(c) + np.array(shift), r)
    ls = Union((s1, s2))
    lo, hi = UNIT
    fmin, fmax = ls.bounds(lo, hi)
    if fmin > 0 or fmax < 0:
        return
    inside = generate_cut_volume_quadrature(ls, lo, hi, n_q).weights.sum()
    outside = generate_cut_volume_quadrature(Complement(ls), lo, hi, n_q).weights.sum()
    assert abs(inside + outside - 1.0) <= 1e-12


def test_small_sphere_inside_one_cell():
    # every height line crosses the interface twice; the rule converges fast in n_q
    ls = Sphere(np.full(3, 0.5), 0.3)
    vol_err, area_err = [], []
    for n_q in (2, 4, 6):
        v = generate_cut_volume_quadrature(ls, *UNIT, n_q)
        s = generate_surface_quadrature(ls, *UNIT, n_q)
        assert not (v.flagged or s.flagged)
        vol_err.append(abs(v.weights.sum() / (4 / 3 * math.pi * 0.3 ** 3) - 1))
        area_err.append(abs(s.weights.sum() / (4 * math.pi * 0.3 ** 2) - 1))
    assert vol_err[2] < 1e-7 and area_err[2] < 1e-6
    assert vol_err[0] > 50 * vol_err[1] > 2500 * vol_err[2]
    assert area_err[0] > 50 * area_err[1] > 2500 * area_err[2]


def _sum_over_mesh(ls, n, n_q, kind):
    h = 2.4 / n
    total = 0.0
    for idx in itertools.product(range(n), repeat=3):
        lo = -1.2 + h * np.array(idx, dtype=float)
        hi = lo + h
        fmin, fmax = ls.bounds(lo, hi)
        if fmax < 0:
            total += h ** 3 if kind == "volume" else 0.0
        elif fmin <= 0:
            gen = generate_cut_volume_quadrature if kind == "volume" else generate_surface_quadrature
            total += float(gen(ls, lo, hi, n_q).weights.sum())
    return total


def test_sphere_area_and_volume_on_mesh():
    ls = Sphere(np.array([0.013, -0.021, 0.007]), 1.0)
    assert abs(_sum_over_mesh(ls, 12, 4, "volume") - 4 / 3 * math.pi) <= 1e-6
    assert abs(_sum_over_mesh(ls, 12, 4, "surface") - 4 * math.pi) <= 1e-5


def test_union_volume_matches_lens_formula():
    r, d = 0.6, 0.7
    ls = Union((Sphere(np.array([-d / 2, 0.0, 0.0]), r), Sphere(np.array([d / 2, 0.0, 0.0]), r)))
    lens = math.pi * (4 * r + d) * (2 * r - d) ** 2 / 12
    exact = 2 * 4 / 3 * math.pi * r ** 3 - lens
    assert abs(_sum_over_mesh(ls, 12, 4, "volume") - exact) <= 1e-6


# -- surface and face rules -----------------------------------------------------------------------------

def test_plane_surface_rule():
    q = generate_surface_quadrature(Plane(X, 0.5), *UNIT, 3)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(q.normals, np.tile(X, (q.size, 1)), atol=1e-15)


def test_diagonal_line_in_unit_square():
    n = np.array([1.0, 1.0]) / math.sqrt(2)
    q = generate_surface_quadrature(Plane(n, 1 / math.sqrt(2)), np.zeros(2), np.ones(2), 3)
    assert abs(q.weights.sum() - math.sqrt(2)) <= 1e-12


def test_plane_cut_face():
    q = generate_cut_face_quadrature(Plane(X, 0.5), [0.0, 0, 0], [1.0, 1, 0], 3)
    assert q.weights.sum() == pytest.approx(0.5, abs=1e-14)
    assert q.points.shape[1] == 2


def test_face_fully_inside_is_rejected():
    with pytest.raises(ValueError):
        generate_cut_face_quadrature(Plane(X, 5.0), [0.0, 0, 0], [1.0, 1, 0], 3)


def test_disc_on_face():
    ls = Sphere(np.array([0.5, 0.5, 0.0]), 0.4)
    q = generate_cut_face_quadrature(ls, [0.0, 0, 0], [1.0, 1, 0], 4)
    exact = math.pi * 0.4 ** 2
    assert abs(q.weights.sum() - exact) <= 1e-6
    # second route: Monte-Carlo indicator with a generous statistical band
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.random((10 ** 6, 2)), np.zeros(10 ** 6)])
    mc = float(np.mean(ls(pts) < 0))
    assert abs(q.weights.sum() - mc) <= 5 * math.sqrt(mc * (1 - mc) / 10 ** 6)


def test_rules_csv_round_trip(tmp_path):
    q = generate_surface_quadrature(Plane(X, 0.5), *UNIT, 2)
    path = tmp_path / "rules.csv"
    write_rules_csv(path, [(7, "surf", q)])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("cell_id,kind")
    assert len(lines) == 1 + q.size
    assert float(lines[1].split(",")[5]) == q.weights[0]
