from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import basis_at, dense_cell, nodal
from cutfem_mf import kernels as K
from cutfem_mf.experiments import kernel_adjoint_gaps
from cutfem_mf.perf import model_kernel_fmas
from cutfem_mf.quadrature import CutCellQuadrature, gauss_rule

DIM = 3


def test_gauss_lobatto_nodes_known_values():
    np.testing.assert_allclose(K.gauss_lobatto_nodes(3), [0, 0.5, 1], atol=1e-15)
    np.testing.assert_allclose(K.gauss_lobatto_nodes(4),
                               [0, 0.5 - math.sqrt(5) / 10, 0.5 + math.sqrt(5) / 10, 1], atol=1e-15)


# -- structured cell ----------------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_structured_cell_constant_and_linear(p):
    sh = K.ShapeInfo.create(p)
    v, g = K.eval_structured_cell(sh, np.full((1,) + (p + 1,) * 3, 2.5), DIM)
    assert np.abs(v - 2.5).max() <= 1e-14 and np.abs(g).max() <= 1e-13
    u = nodal(p, lambda x, y, z: x)[None]
    v, g = K.eval_structured_cell(sh, u, DIM)
    xq = sh.qpoints[None, None, None, :]
    assert np.abs(v[0] - xq).max() <= 1e-14
    assert np.abs(g[0, 0] - 1).max() <= 1e-14 and np.abs(g[0, 1:]).max() <= 1e-14


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_structured_cell_matches_dense_oracle(p):
    rng = np.random.default_rng(p)
    sh = K.ShapeInfo.create(p)
    n, kd = 3, (p + 1) ** 3
    u = rng.standard_normal((n, kd))
    val, grads = dense_cell(p, sh.n_q)
    v, g = K.eval_structured_cell(sh, u.reshape((n,) + (p + 1,) * 3), DIM)
    np.testing.assert_allclose(v.reshape(n, -1), u @ val.T, atol=1e-12)
    for c in range(3):
        np.testing.assert_allclose(g[:, c].reshape(n, -1), u @ grads[c].T, atol=1e-12)
    # integration is the transpose
    cv = rng.standard_normal(v.shape)
    cg = rng.standard_normal(g.shape)
    ref = cv.reshape(n, -1) @ val + sum(cg[:, c].reshape(n, -1) @ grads[c] for c in range(3))
    out = K.integrate_structured_cell(sh, cv, cg, DIM)
    np.testing.assert_allclose(out.reshape(n, -1), ref, atol=1e-12)


def test_integrate_ones_gives_basis_integrals():
    p = 3
    sh = K.ShapeInfo.create(p)
    w = np.einsum("i,j,k->ijk", sh.qweights, sh.qweights, sh.qweights)[None]
    out = K.integrate_structured_cell(sh, w, np.zeros((1, 3) + w.shape[1:]), DIM).reshape(-1)
    val, _ = dense_cell(p, sh.n_q)
    np.testing.assert_allclose(out, w.reshape(-1) @ val, atol=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-14)


def test_zero_in_zero_out():
    sh = K.ShapeInfo.create(2)
    z = np.zeros((2, 3, 3, 3))
    v, g = K.eval_structured_cell(sh, z, DIM)
    assert not v.any() and not g.any()
    assert not K.integrate_structured_cell(sh, v, g, DIM).any()


# -- structured faces -----------------------------------------------------------------------------------

def test_face_values_and_normal_derivative_of_x():
    sh = K.ShapeInfo.create(2)
    u = nodal(2, lambda x, y, z: x)[None]
    v, g = K.eval_structured_face(sh, u, DIM, 1)  # face x = 1
    assert np.abs(v - 1).max() <= 1e-14
    assert np.abs(g[:, 0] - 1).max() <= 1e-14


def test_face_constant_has_zero_tangential_gradient():
    sh = K.ShapeInfo.create(3)
    for face in range(6):
        v, g = K.eval_structured_face(sh, np.full((1, 4, 4, 4), 3.0), DIM, face)
        assert np.abs(v - 3).max() <= 1e-14 and np.abs(g).max() <= 1e-12


@pytest.mark.parametrize("face", range(6))
def test_structured_face_matches_dense_oracle(face):
    p = 3
    rng = np.random.default_rng(face)
    sh = K.ShapeInfo.create(p)
    a, side = divmod(face, 2)
    q = gauss_rule(sh.n_q).points
    grid = np.stack(np.meshgrid(q, q, indexing="ij"), axis=-1).reshape(-1, 2)[:, ::-1]
    pts = np.insert(grid, a, float(side), axis=1)  # in-face points, lower axis fastest
    val, grad = basis_at(p, pts)
    u = rng.standard_normal((2, (p + 1) ** 3))
    v, g = K.eval_structured_face(sh, u.reshape(2, 4, 4, 4), DIM, face)
    np.testing.assert_allclose(v.reshape(2, -1), u @ val.T, atol=1e-12)
    for c in range(3):
        np.testing.assert_allclose(g[:, c].reshape(2, -1), u @ grad[:, c].T, atol=1e-12)


# -- extrapolation --------------------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_extrapolation_reproduces_global_polynomial(p):
    rng = np.random.default_rng(10 + p)
    coef = rng.standard_normal((p + 1,) * 3)
    q = K.ShapeInfo.create(p).qpoints
    sh = K.ShapeInfo.create(p)
    for axis in range(3):
        for shift in (-1, 1):
            u = nodal(p, lambda x, y, z: np.polynomial.polynomial.polyval3d(x, y, z, coef))[None]
            got = K.eval_extrapolated(sh, u, DIM, axis, shift)[0]
            z, y, x = np.meshgrid(q, q, q, indexing="ij")
            pos = [x, y, z]
            pos[axis] = pos[axis] + shift
            exact = np.polynomial.polynomial.polyval3d(*pos, coef)
            assert np.abs(got - exact).max() <= 1e-12 * max(1.0, np.abs(exact).max())


def test_extrapolation_of_constant_and_random():
    p = 3
    sh = K.ShapeInfo.create(p)
    got = K.eval_extrapolated(sh, np.full((1, 4, 4, 4), 1.5), DIM, 2, -1)
    assert np.abs(got - 1.5).max() <= 1e-13
    rng = np.random.default_rng(3)
    u = rng.standard_normal((1, 64))
    q = sh.qpoints
    z, y, x = np.meshgrid(q, q, q, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel() + 1.0, z.ravel()], axis=-1)
    val, _ = basis_at(p, pts)
    got = K.eval_extrapolated(sh, u.reshape(1, 4, 4, 4), DIM, 1, 1)
    np.testing.assert_allclose(got.reshape(-1), val @ u[0], atol=1e-11)


# -- unstructured points ---------------------------------------------------------------------------------

def _pack(points, weights=None, lanes=4, dim=3):
    rules = [CutCellQuadrature(np.asarray(p, dtype=float),
                               np.ones(len(p)) if weights is None else np.asarray(w, dtype=float))
             for p, w in zip(points, weights or [None] * len(points))]
    return K.pack_rules(np.arange(len(rules)), rules, lanes, dim)


def _per_point(packed, arr):
    """Drop padding: ``(G, W, ...)`` -> list of real-point arrays per entity."""
    out = []
    for e in range(len(packed.entities)):
        flat = arr[packed.offsets[e]:packed.offsets[e + 1]].reshape((-1,) + arr.shape[2:])
        out.append(flat[:packed.n_points[e]])
    return out


def test_point_at_node_returns_dof():
    p = 2
    sh = K.ShapeInfo.create(p)
    n = K.gauss_lobatto_nodes(p + 1)
    u = np.random.default_rng(0).standard_normal((1, 27))
    # node (i, j, l) = (2, 0, 1) has lexicographic index i + 3 j + 9 l
    pk = _pack([[[n[2], n[0], n[1]]]])
    v, _ = K.eval_unstructured_points(sh, u, pk)
    assert v[0, 0] == pytest.approx(u[0, 2 + 9], abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
                                   min_size=1, max_size=9))
def test_points_reproduce_x2y(p, pts):
    sh = K.ShapeInfo.create(p)
    u = nodal(p, lambda x, y, z: x * x * y).reshape(1, -1)
    pk = _pack([pts])
    v, g = K.eval_unstructured_points(sh, u, pk)
    P = np.array(pts)
    x, y = P[:, 0], P[:, 1]
    np.testing.assert_allclose(_per_point(pk, v)[0], x * x * y, atol=1e-13)
    exact = np.stack([2 * x * y, x * x, np.zeros_like(x)], axis=-1)
    np.testing.assert_allclose(_per_point(pk, g)[0], exact, atol=1e-13)


@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_points_match_dense_basis(p):
    rng = np.random.default_rng(20 + p)
    sh = K.ShapeInfo.create(p)
    pts = [rng.random((m, 3)) for m in (1, 5, 9)]
    wts = [rng.random(len(x)) for x in pts]
    pk = _pack(pts, wts)
    u = rng.standard_normal((3, (p + 1) ** 3))
    v, g = K.eval_unstructured_points(sh, u, pk)
    cv = [rng.standard_normal(len(x)) for x in pts]
    cg = [rng.standard_normal((len(x), 3)) for x in pts]
    vals = np.zeros(v.shape)
    grads = np.zeros(g.shape)
    for e, x in enumerate(pts):
        val, grad = basis_at(p, x)
        np.testing.assert_allclose(_per_point(pk, v)[e], val @ u[e], atol=1e-12)
        np.testing.assert_allclose(_per_point(pk, g)[e], np.einsum("mci,i->mc", grad, u[e]), atol=1e-12)
        sl = slice(pk.offsets[e], pk.offsets[e + 1])
        flat_v = np.zeros(vals[sl].size)
        flat_v[:len(x)] = cv[e]
        vals[sl] = flat_v.reshape(vals[sl].shape)
        flat_g = np.zeros((vals[sl].size, 3))
        flat_g[:len(x)] = cg[e]
        grads[sl] = flat_g.reshape(grads[sl].shape)
    out = K.integrate_unstructured_points(sh, vals, grads, pk, 3)
    for e, x in enumerate(pts):
        val, grad = basis_at(p, x)
        np.testing.assert_allclose(out[e], cv[e] @ val + np.einsum("mc,mci->i", cg[e], grad), atol=1e-12)


def test_single_point_value_integration():
    p = 2
    sh = K.ShapeInfo.create(p)
    x = np.array([[0.3, 0.7, 0.1]])
    pk = _pack([x], lanes=1)
    jxw, vhat = 0.25, 1.7
    out = K.integrate_unstructured_points(sh, np.array([[jxw * vhat]]), None, pk, 1)
    val, _ = basis_at(p, x)
    np.testing.assert_allclose(out[0], val[0] * jxw * vhat, atol=1e-15)


def test_padding_lanes_do_not_contribute():
    p = 3
    rng = np.random.default_rng(5)
    sh = K.ShapeInfo.create(p)
    pts = rng.random((7, 3))
    w = rng.random(7)
    u = rng.standard_normal((1, 64))
    wide, narrow = _pack([pts], [w], lanes=8), _pack([pts], [w], lanes=1)
    assert wide.n_padded == 8
    res = {}
    for name, pk in (("wide", wide), ("narrow", narrow)):
        v, g = K.eval_unstructured_points(sh, u, pk)
        assert np.all(np.isfinite(v)) and np.all(np.isfinite(g))
        res[name] = K.integrate_unstructured_points(sh, v * pk.jxw, g * pk.jxw[..., None], pk, 1)
    np.testing.assert_allclose(res["wide"], res["narrow"], rtol=1e-13, atol=1e-14)
    assert np.all(wide.jxw.reshape(-1)[7:] == 0)


# -- unstructured face points -------------------------------------------------------------------------

def test_face_points_value_and_normal_derivative():
    p = 2
    sh = K.ShapeInfo.create(p)
    a, b = 0.3, 0.8
    pk = _pack([[[a, b]]], dim=2)
    u = nodal(p, lambda x, y, z: y * z).reshape(1, -1)
    v, _ = K.eval_unstructured_face_points(sh, u, DIM, 0, pk)
    assert v[0, 0] == pytest.approx(a * b, abs=1e-14)
    ux = nodal(p, lambda x, y, z: x).reshape(1, -1)
    for face in (0, 1):
        _, dn = K.eval_face_points_value_normal(sh, ux, DIM, face, pk)
        assert dn[0, 0] == pytest.approx(1.0, abs=1e-13)


# -- properties ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_every_kernel_pair_is_adjoint(p):
    gaps = kernel_adjoint_gaps(p, np.random.default_rng(p), lanes=8)
    assert len(gaps) == 37
    assert max(gaps.values()) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10 ** 6))
def test_polynomial_reproduction(p, seed):
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((p + 1,) * 3)
    poly = lambda x, y, z: np.polynomial.polynomial.polyval3d(x, y, z, coef)  # noqa: E731
    sh = K.ShapeInfo.create(p)
    v, _ = K.eval_structured_cell(sh, nodal(p, poly)[None], DIM)
    q = sh.qpoints
    z, y, x = np.meshgrid(q, q, q, indexing="ij")
    scale = max(1.0, np.abs(coef).sum())
    assert np.abs(v[0] - poly(x, y, z)).max() <= 1e-12 * scale
    pts = rng.random((6, 3))
    pv, _ = K.eval_unstructured_points(sh, nodal(p, poly).reshape(1, -1), _pack([pts]))
    assert np.abs(_per_point(_pack([pts]), pv)[0] - poly(*pts.T)).max() <= 1e-12 * scale


@pytest.mark.parametrize("lanes", [2, 4, 8, 16])
def test_lane_layout_independence(lanes):
    p = 3
    sh = K.ShapeInfo.create(p)
    u = np.random.default_rng(lanes).standard_normal((lanes, 4, 4, 4))
    v_many, g_many = K.eval_structured_cell(sh, u, DIM)
    v_last, g_last = K.eval_structured_cell(sh, np.moveaxis(u, 0, -1), DIM, trailing=1)
    for i in range(lanes):
        v1, g1 = K.eval_structured_cell(sh, u[i:i + 1], DIM)
        np.testing.assert_allclose(v_many[i], v1[0], rtol=1e-13, atol=1e-14)
        np.testing.assert_allclose(v_last[..., i], v1[0], rtol=1e-13, atol=1e-14)
        np.testing.assert_allclose(g_last[..., i], g1[0], rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5])
def test_structured_fma_count(p):
    sh = K.ShapeInfo.create(p)
    k = nq = p + 1
    with K.count_fmas() as c:
        K.eval_structured_cell(sh, np.zeros((1,) + (k,) * 3), DIM)
    assert c.fmas == k ** 3 * nq + k ** 2 * nq ** 2 + nq ** 3 * k + 3 * nq ** 4
    assert c.fmas == model_kernel_fmas("structured_cell", k, nq)


def test_counter_requires_context():
    with pytest.raises(K.InstrumentationDisabled):
        K.current_counter()
