"""Shared builders and dense oracles for the tests."""
from __future__ import annotations

import numpy as np
from numpy.polynomial import Polynomial

from cutfem_mf.geometry import Complement, Plane, Sphere, Union
from cutfem_mf.kernels import gauss_lobatto_nodes
from cutfem_mf.mesh import build_dof_handler, build_mesh
from cutfem_mf.operators import CutPoissonOperator, OperatorConfig, build_geometry_tables
from cutfem_mf.quadrature import gauss_rule

X = np.array([1.0, 0.0, 0.0])
FAR = Plane(X, 100.0)


def slab(c0: float, c1: float):
    """``{c0 < x < c1}`` as the complement of a union of complements."""
    return Complement(Union((Complement(Plane(-X, -c0)), Complement(Plane(X, c1)))))


def sphere(radius: float = 0.8):
    return Sphere(np.array([0.03, -0.02, 0.01]), radius)


def make_operator(ls, n, fe, p, origin=-1.035, extent=2.07, n_workers=1, **cfg):
    mesh = build_mesh(origin, extent, n)
    h = build_dof_handler(mesh, ls, fe, p)
    t = build_geometry_tables(h, ls, n_q=cfg.get("n_q"))
    return CutPoissonOperator(OperatorConfig(fe, p, **cfg), h, t, n_workers=n_workers)


def node_points(handler):
    """Physical nodal points ``(n_active, k^d, d)`` (x fastest)."""
    gl = gauss_lobatto_nodes(handler.k)
    z, y, x = np.meshgrid(gl, gl, gl, indexing="ij")
    ref = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)
    lo, _ = handler.mesh.cell_bounds(handler.active_cells)
    return lo[:, None, :] + ref[None] * handler.mesh.h


def interpolate(handler, fn):
    out = np.zeros(handler.n_dofs)
    out[handler.cell_dofs] = fn(node_points(handler))
    return out


# -- dense basis oracle, independent of the kernels -------------------------------------

def lagrange_polys(nodes):
    """Lagrange polynomials through ``nodes`` from the product formula."""
    out = []
    for i, xi in enumerate(nodes):
        p = Polynomial([1.0])
        for j, xj in enumerate(nodes):
            if j != i:
                p = p * Polynomial([-xj, 1.0]) / (xi - xj)
        out.append(p)
    return out


def tables_1d(degree, x):
    polys = lagrange_polys(gauss_lobatto_nodes(degree + 1))
    x = np.asarray(x, dtype=float)
    return (np.stack([p(x) for p in polys], axis=-1),
            np.stack([p.deriv()(x) for p in polys], axis=-1))


def dense_tensor(mats):
    """Kronecker product for lexicographic ordering with x fastest; ``mats`` = (x, y, z)."""
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(m, out)
    return out


def dense_cell(degree, n_q):
    S, D = tables_1d(degree, gauss_rule(n_q).points)
    val = dense_tensor([S, S, S])
    grads = [dense_tensor([D, S, S]), dense_tensor([S, D, S]), dense_tensor([S, S, D])]
    return val, grads


def basis_at(degree, pts):
    """Dense values ``(m, k^3)`` and gradients ``(m, 3, k^3)`` at arbitrary reference points."""
    per = [tables_1d(degree, pts[:, a]) for a in range(pts.shape[1])]
    dim = pts.shape[1]
    k = degree + 1
    idx = np.stack(np.unravel_index(np.arange(k ** dim), (k,) * dim, order="F"), axis=-1)
    val = np.ones((len(pts), k ** dim))
    grad = np.ones((len(pts), dim, k ** dim))
    for a in range(dim):
        S, D = per[a]
        val *= S[:, idx[:, a]]
        for c in range(dim):
            grad[:, c] *= (D if c == a else S)[:, idx[:, a]]
    return val, grad


def nodal(degree, fn):
    """Nodal dofs of ``fn(x, y, z)`` as a ``(k, k, k)`` array indexed ``[z, y, x]``."""
    n = gauss_lobatto_nodes(degree + 1)
    z, y, x = np.meshgrid(n, n, n, indexing="ij")
    return fn(x, y, z)
