"""Evaluate / integrate kernels for tensor-product Lagrange elements.

Nodal values of one cell are stored as an array with ``d`` trailing axes of
length ``k`` ordered ``(..., z, y, x)`` so that x is the fastest index. Any
number of leading axes is allowed; they play the role of SIMD lanes and cell
batches. Quadrature data uses the same layout with ``n_q`` points per axis.

All contractions go through :func:`_contract` or the point-group helpers,
which report the number of fused multiply-adds to an optional thread-local
counter.
"""
from __future__ import annotations

import math

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg

from .quadrature import gauss_rule

MAX_DEGREE = 7

# -- instrumentation ---------------------------------------------------------------

_state = threading.local()


class InstrumentationDisabled(RuntimeError):
    pass


@dataclass
class FmaCounter:
    fmas: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.fmas


def _tally(n: int) -> None:
    c = getattr(_state, "counter", None)
    if c is not None:
        c.fmas += int(n)


@contextmanager
def count_fmas():
    """Count the multiply-adds executed by kernels on this thread."""
    prev = getattr(_state, "counter", None)
    c = FmaCounter()
    _state.counter = c
    try:
        yield c
    finally:
        _state.counter = prev
        if prev is not None:
            prev.fmas += c.fmas


def current_counter() -> FmaCounter:
    c = getattr(_state, "counter", None)
    if c is None:
        raise InstrumentationDisabled("no active FMA counter on this thread")
    return c


# -- 1D basis -----------------------------------------------------------------------

@lru_cache(maxsize=None)
def gauss_lobatto_nodes(k: int) -> np.ndarray:
    """``k`` Gauss-Lobatto points on [0, 1]."""
    if k < 2:
        raise ValueError("Gauss-Lobatto rule needs at least two points")
    e = np.zeros(k)
    e[-1] = 1.0
    inner = npleg.legroots(npleg.legder(e)) if k > 2 else np.empty(0)
    # polish interior roots of P'_{k-1} with Newton
    for _ in range(3):
        if len(inner) == 0:
            break
        f = npleg.legval(inner, npleg.legder(e))
        df = npleg.legval(inner, npleg.legder(e, 2))
        inner = inner - f / df
    x = np.concatenate([[-1.0], np.sort(inner), [1.0]])
    return 0.5 * (x + 1.0)


class LagrangeBasis1D:
    """Lagrange polynomials through given nodes, evaluated via a Legendre expansion."""

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes, dtype=float)
        n = len(self.nodes)
        self.degree = n - 1
        self._coef = np.linalg.inv(npleg.legvander(2 * self.nodes - 1, self.degree))
        dmat = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            d = npleg.legder(e)
            dmat[: len(d), j] = d
        self._dcoef = 2.0 * dmat @ self._coef

    def values(self, x) -> np.ndarray:
        v = npleg.legvander(2 * np.asarray(x, dtype=float) - 1, self.degree)
        return v @ self._coef

    def derivatives(self, x) -> np.ndarray:
        v = npleg.legvander(2 * np.asarray(x, dtype=float) - 1, self.degree)
        return v @ self._dcoef


@dataclass(frozen=True, eq=False)
class ShapeInfo:
    """1D tables for a degree-``p`` nodal element and ``n_q`` Gauss points."""

    degree: int
    n_q: int
    nodes: np.ndarray = field(repr=False)
    qpoints: np.ndarray = field(repr=False)
    qweights: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    gradients: np.ndarray = field(repr=False)
    colloc_derivative: np.ndarray = field(repr=False)
    face_values: np.ndarray = field(repr=False)
    face_gradients: np.ndarray = field(repr=False)
    shifted_values: dict = field(repr=False)
    shifted_gradients: dict = field(repr=False)
    basis: LagrangeBasis1D = field(repr=False)

    @property
    def k(self) -> int:
        return self.degree + 1

    @classmethod
    def create(cls, degree: int, n_q: int | None = None) -> "ShapeInfo":
        return _shape_info(int(degree), int(n_q if n_q is not None else degree + 1))


@lru_cache(maxsize=None)
def _shape_info(degree: int, n_q: int) -> ShapeInfo:
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in 1..{MAX_DEGREE}, got {degree}")
    nodes = gauss_lobatto_nodes(degree + 1)
    basis = LagrangeBasis1D(nodes)
    rule = gauss_rule(n_q)
    S = basis.values(rule.points)
    dS = basis.derivatives(rule.points)
    colloc = LagrangeBasis1D(rule.points).derivatives(rule.points)
    fv = np.eye(degree + 1)[[0, -1]]
    fg = basis.derivatives(np.array([0.0, 1.0]))
    sv = {s: basis.values(rule.points + s) for s in (-1, 1)}
    sg = {s: basis.derivatives(rule.points + s) for s in (-1, 1)}
    return ShapeInfo(degree, n_q, nodes, rule.points, rule.weights, S, dS, colloc,
                     fv, fg, sv, sg, basis)


@dataclass(frozen=True)
class LaneConfig:
    lanes: int = 4

    def __post_init__(self):
        if self.lanes not in (1, 2, 4, 8, 16):
            raise ValueError(f"lane count must be a power of two <= 16, got {self.lanes}")

    def padded(self, n: int) -> int:
        return -(-n // self.lanes) * self.lanes


# -- tensor contractions -----------------------------------------------------------
#
# ``trailing`` is the number of batch axes stored *after* the tensor axes. The
# default layout keeps batches in front; the operator's hot loops put cells last
# so that every 1D contraction becomes a few large matrix products.

def _pos(ndim: int, axis: int, trailing: int) -> int:
    return ndim - 1 - axis - trailing


def _contract(A: np.ndarray, u: np.ndarray, axis: int, trailing: int = 0) -> np.ndarray:
    """Apply ``A`` (m x n) along tensor axis ``axis`` (0 = x, the fastest tensor axis)."""
    m, n = A.shape
    shp = u.shape
    pos = _pos(u.ndim, axis, trailing)
    lead, inner = shp[:pos], shp[pos + 1:]
    nlead = math.prod(lead)
    ninner = math.prod(inner)
    if ninner == 1:
        out = (u.reshape(nlead, n) @ A.T).reshape(*lead, m)
    elif nlead == 1:
        out = (A @ u.reshape(n, ninner)).reshape(*lead, m, *inner)
    else:
        # broadcast matmul keeps the layout, no transposes needed
        out = (A @ u.reshape(nlead, n, ninner)).reshape(*lead, m, *inner)
    _tally(out.size * n)
    return out


def _take_layer(u: np.ndarray, axis: int, index: int, trailing: int = 0) -> np.ndarray:
    return np.take(u, index, axis=_pos(u.ndim, axis, trailing))


def _put_layer(shape, axis, index, layer, trailing: int = 0) -> np.ndarray:
    out = np.zeros(shape)
    sl = [slice(None)] * len(shape)
    sl[_pos(len(shape), axis, trailing)] = index
    out[tuple(sl)] = layer
    return out


# -- structured cells --------------------------------------------------------------

def eval_structured_values(tables, u: np.ndarray, dim: int, trailing: int = 0) -> np.ndarray:
    """Values at tensor points with one 1D table per axis (x first)."""
    t = u
    for a in range(dim):
        t = _contract(tables[a], t, a, trailing)
    return t


def integrate_structured_values(tables, c: np.ndarray, dim: int, trailing: int = 0) -> np.ndarray:
    t = c
    for a in reversed(range(dim)):
        t = _contract(tables[a].T, t, a, trailing)
    return t


def _grad_axis(ndim: int, dim: int, trailing: int) -> int:
    """Array position of the gradient component axis, just before the tensor axes."""
    return ndim - dim - 1 - trailing


def eval_structured_cell(shape: ShapeInfo, u: np.ndarray, dim: int, gradients: bool = True,
                         trailing: int = 0):
    """Values ``(..., n_q^d)`` and reference gradients ``(..., d, n_q^d)``."""
    vals = eval_structured_values([shape.values] * dim, u, dim, trailing)
    if not gradients:
        return vals, None
    D = shape.colloc_derivative
    grads = np.stack([_contract(D, vals, a, trailing) for a in range(dim)],
                     axis=_grad_axis(vals.ndim + 1, dim, trailing))
    return vals, grads


def integrate_structured_cell(shape: ShapeInfo, values, grads, dim: int, trailing: int = 0) -> np.ndarray:
    """Transpose of :func:`eval_structured_cell`; either input may be ``None``."""
    if values is None and grads is None:
        raise ValueError("nothing to integrate")
    if grads is not None:
        DT = shape.colloc_derivative.T
        t = None if values is None else np.array(values, dtype=float, copy=True)
        gax = _grad_axis(grads.ndim, dim, trailing)
        for a in range(dim):
            g = _contract(DT, np.take(grads, a, axis=gax), a, trailing)
            t = g if t is None else t + g
    else:
        t = values
    return integrate_structured_values([shape.values] * dim, t, dim, trailing)


def _shifted_tables(shape: ShapeInfo, dim: int, axis: int, shift: int):
    if shift not in (-1, 1) or not 0 <= axis < dim:
        raise ValueError("shift must be +-1 along a valid axis")
    tables = [shape.values] * dim
    tables[axis] = shape.shifted_values[shift]
    return tables


def eval_extrapolated(shape: ShapeInfo, u: np.ndarray, dim: int, axis: int, shift: int,
                      trailing: int = 0) -> np.ndarray:
    """Values of the polynomial extension of ``u`` at Gauss points moved by ``shift`` along ``axis``."""
    return eval_structured_values(_shifted_tables(shape, dim, axis, shift), u, dim, trailing)


def integrate_extrapolated(shape: ShapeInfo, c: np.ndarray, dim: int, axis: int, shift: int,
                           trailing: int = 0) -> np.ndarray:
    return integrate_structured_values(_shifted_tables(shape, dim, axis, shift), c, dim, trailing)


# -- structured faces --------------------------------------------------------------

def _face_axes(dim: int, axis: int) -> list[int]:
    return [b for b in range(dim) if b != axis]


def reduce_to_face(shape: ShapeInfo, u: np.ndarray, dim: int, face: int, trailing: int = 0):
    """Face values (Gauss-Lobatto delta) and reference normal derivative, ``k^(d-1)`` each."""
    a, side = divmod(face, 2)
    vals = _take_layer(u, a, 0 if side == 0 else shape.k - 1, trailing)
    dn = _contract(shape.face_gradients[side][None, :], u, a, trailing)
    dn = _take_layer(dn, a, 0, trailing)
    return vals, dn


def expand_from_face(shape: ShapeInfo, vals, dn, dim: int, face: int, trailing: int = 0) -> np.ndarray:
    """Transpose of :func:`reduce_to_face`."""
    a, side = divmod(face, 2)
    k = shape.k
    ref = vals if vals is not None else dn
    # position the normal axis takes once reinserted
    pos = ref.ndim - a - trailing
    if dn is not None:
        out = _contract(shape.face_gradients[side][:, None], np.expand_dims(dn, axis=pos), a, trailing)
    else:
        out = np.zeros(ref.shape[:pos] + (k,) + ref.shape[pos:])
    if vals is not None:
        layer = [slice(None)] * out.ndim
        layer[pos] = 0 if side == 0 else k - 1
        out[tuple(layer)] += vals
    return out


def eval_structured_face(shape: ShapeInfo, u: np.ndarray, dim: int, face: int, trailing: int = 0):
    """Values ``(..., n_q^(d-1))`` and reference gradients ``(..., d, n_q^(d-1))`` on a face."""
    a = face // 2
    fv, fdn = reduce_to_face(shape, u, dim, face, trailing)
    S = shape.values
    for i in range(dim - 1):
        fv = _contract(S, fv, i, trailing)
        fdn = _contract(S, fdn, i, trailing)
    D = shape.colloc_derivative
    comps = []
    tang = iter(range(dim - 1))
    for b in range(dim):
        comps.append(fdn if b == a else _contract(D, fv, next(tang), trailing))
    return fv, np.stack(comps, axis=_grad_axis(fv.ndim + 1, dim - 1, trailing))


def integrate_structured_face(shape: ShapeInfo, values, grads, dim: int, face: int,
                              trailing: int = 0) -> np.ndarray:
    a = face // 2
    D = shape.colloc_derivative
    ST = shape.values.T
    fv = None if values is None else np.array(values, dtype=float, copy=True)
    fdn = None
    if grads is not None:
        gaxis = _grad_axis(grads.ndim, dim - 1, trailing)
        tang = iter(range(dim - 1))
        for b in range(dim):
            g = np.take(grads, b, axis=gaxis)
            if b == a:
                fdn = g
            else:
                t = _contract(D.T, g, next(tang), trailing)
                fv = t if fv is None else fv + t
    for i in reversed(range(dim - 1)):
        if fv is not None:
            fv = _contract(ST, fv, i, trailing)
        if fdn is not None:
            fdn = _contract(ST, fdn, i, trailing)
    return expand_from_face(shape, fv, fdn, dim, face, trailing)


def _interpolate_in_face(S, F, dim, reverse=False, trailing: int = 0):
    axes = range(dim - 1)
    for i in (reversed(axes) if reverse else axes):
        F = _contract(S, F, i, trailing)
    return F


def eval_face_value_normal(shape: ShapeInfo, u: np.ndarray, dim: int, face: int, trailing: int = 0):
    """Values and reference normal derivative at the face's tensor Gauss points."""
    F = np.stack(reduce_to_face(shape, u, dim, face, trailing))
    F = _interpolate_in_face(shape.values, F, dim, trailing=trailing)
    return F[0], F[1]


def integrate_face_value_normal(shape: ShapeInfo, cv, cdn, dim: int, face: int,
                                trailing: int = 0) -> np.ndarray:
    F = _interpolate_in_face(shape.values.T, np.stack([cv, cdn]), dim, reverse=True, trailing=trailing)
    return expand_from_face(shape, F[0], F[1], dim, face, trailing)


def eval_face_pair_value_normal(shape: ShapeInfo, um: np.ndarray, up: np.ndarray, dim: int, axis: int,
                                trailing: int = 0):
    """Both sides of interior faces normal to ``axis``: minus cell (upper face) and plus cell.

    Returns the stack (minus values, minus normal derivatives, plus values,
    plus normal derivatives) along a new first axis.
    """
    F = np.stack(reduce_to_face(shape, um, dim, 2 * axis + 1, trailing)
                 + reduce_to_face(shape, up, dim, 2 * axis, trailing))
    return _interpolate_in_face(shape.values, F, dim, trailing=trailing)


def integrate_face_pair_value_normal(shape: ShapeInfo, coeffs: np.ndarray, dim: int, axis: int,
                                     trailing: int = 0):
    """Transpose of :func:`eval_face_pair_value_normal`; returns minus and plus contributions."""
    F = _interpolate_in_face(shape.values.T, coeffs, dim, reverse=True, trailing=trailing)
    om = expand_from_face(shape, F[0], F[1], dim, 2 * axis + 1, trailing)
    op = expand_from_face(shape, F[2], F[3], dim, 2 * axis, trailing)
    return om, op


# -- point groups ------------------------------------------------------------------

@dataclass
class QuadDataPacked:
    """Points of many entities stored in groups of ``lanes`` points.

    Every group belongs to exactly one entity (``owner``). Padding slots repeat
    the last point of the entity and carry zero weight.
    """

    lanes: int
    points: np.ndarray        # (G, W, dim) reference coordinates
    jxw: np.ndarray           # (G, W)
    normals: np.ndarray | None  # (G, W, d) physical unit normals
    owner: np.ndarray         # (G,) position in ``entities``
    entities: np.ndarray      # entity ids (cells or faces)
    offsets: np.ndarray       # (n_entities + 1,) group offsets
    n_points: np.ndarray      # real points per entity
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_groups(self) -> int:
        return len(self.owner)

    @property
    def n_padded(self) -> int:
        return self.n_groups * self.lanes


def pack_rules(entities, rules, lanes: int, dim: int, with_normals: bool = False) -> QuadDataPacked:
    """Pack ``rules`` (objects with ``points``, ``weights`` and maybe ``normals``)."""
    entities = np.asarray(entities, dtype=np.int64)
    counts = np.array([r.size for r in rules], dtype=np.int64)
    groups = -(-counts // lanes)
    offsets = np.concatenate([[0], np.cumsum(groups)])
    G = int(offsets[-1])
    pts = np.zeros((G, lanes, dim))
    jxw = np.zeros((G, lanes))
    nrm = np.zeros((G, lanes, len(rules[0].normals[0]) if with_normals and counts.sum() else dim)) \
        if with_normals else None
    owner = np.repeat(np.arange(len(rules)), groups)
    for e, r in enumerate(rules):
        n = counts[e]
        if n == 0:
            continue
        npad = groups[e] * lanes
        idx = np.minimum(np.arange(npad), n - 1)
        sl = slice(offsets[e], offsets[e + 1])
        pts[sl] = r.points[idx].reshape(groups[e], lanes, dim)
        w = np.zeros(npad)
        w[:n] = r.weights
        jxw[sl] = w.reshape(groups[e], lanes)
        if with_normals:
            nrm[sl] = r.normals[idx].reshape(groups[e], lanes, -1)
    return QuadDataPacked(lanes, pts, jxw, nrm, owner, entities, offsets, counts)


@dataclass(frozen=True)
class PointTables:
    """1D basis values and derivatives at packed points.

    ``values``/``derivatives`` are ``(G, W, dim, k)``. The ``*_last`` copies are
    ``(dim, k, W*G)`` with the group index fastest, which is the layout the point
    kernels work in: every multiply-add then runs over long contiguous rows.
    """

    values: np.ndarray
    derivatives: np.ndarray
    values_last: np.ndarray
    derivatives_last: np.ndarray

    @classmethod
    def from_tables(cls, S: np.ndarray, dS: np.ndarray) -> "PointTables":
        G, W, dim, k = S.shape
        last = lambda T: np.ascontiguousarray(T.transpose(2, 3, 1, 0)).reshape(dim, k, W * G)  # noqa: E731
        return cls(S, dS, last(S), last(dS))


def point_tables(shape: ShapeInfo, packed: QuadDataPacked) -> PointTables:
    """Basis tables at the packed points, computed once per degree and cached on ``packed``."""
    key = shape.degree
    if key not in packed._tables:
        pts = packed.points
        packed._tables[key] = PointTables.from_tables(shape.basis.values(pts), shape.basis.derivatives(pts))
    return packed._tables[key]


def _as_tables(S, dS) -> PointTables:
    return S if isinstance(S, PointTables) else PointTables.from_tables(S, dS)


def _sum_groups(per_group: np.ndarray, packed: QuadDataPacked, n: int) -> np.ndarray:
    """Sum group rows ``(G, m)`` into their entities (groups of one entity are contiguous)."""
    out = np.zeros((n, per_group.shape[1]))
    counts = np.diff(packed.offsets)
    filled = np.flatnonzero(counts > 0)
    if len(filled):
        out[filled] = np.add.reduceat(per_group, packed.offsets[filled], axis=0)
    return out


def eval_points(S, dS, u: np.ndarray, gradients: bool = True):
    """Evaluate per-group dofs ``u (G, k^dim)`` at the group's points.

    ``S``/``dS`` are ``(G, W, dim, k)`` tables, or ``S`` is a :class:`PointTables`
    (then ``dS`` is ignored). Returns values ``(G, W)`` and reference gradients
    ``(G, W, dim)``. Partial sums of the value path are reused by the gradient
    path; each stage contracts one axis for all points at once.
    """
    tab = _as_tables(S, dS)
    G, W, dim, k = tab.values.shape
    t = _eval_points_last(tab, np.ascontiguousarray(np.asarray(u).reshape(G, -1).T), gradients)
    t = t.reshape(t.shape[0], W, G).transpose(0, 2, 1)
    if not gradients:
        return t[0], None
    return t[0], np.moveaxis(t[1:], 0, -1)


def _eval_points_last(tab: PointTables, uT: np.ndarray, gradients: bool) -> np.ndarray:
    """``uT`` is ``(k^dim, G)``; returns ``(1 + dim*gradients, W*G)`` (value, d/dx_0, ...)."""
    G, W, dim, k = tab.values.shape
    P = G * W
    rest = k ** (dim - 1)
    u = uT.reshape(rest, k, 1, G)
    # x stage: broadcast each cell's coefficients over its W points
    S0 = tab.values_last[0].reshape(k, W, G)
    v = u[:, 0] * S0[0]
    for i in range(1, k):
        v += u[:, i] * S0[i]
    paths = [v.reshape(rest, P)]
    if gradients:
        dS0 = tab.derivatives_last[0].reshape(k, W, G)
        g = u[:, 0] * dS0[0]
        for i in range(1, k):
            g += u[:, i] * dS0[i]
        paths.append(g.reshape(rest, P))
    t = np.stack(paths)
    _tally(len(paths) * P * rest * k)
    for b in range(1, dim):
        Sb = tab.values_last[b]
        t = t.reshape(t.shape[0], rest // k, k, P)
        new = t[:, :, 0] * Sb[0]
        for i in range(1, k):
            new += t[:, :, i] * Sb[i]
        _tally(t.shape[0] * P * (rest // k) * k)
        if gradients:
            dSb = tab.derivatives_last[b]
            g = t[0, :, 0] * dSb[0]
            for i in range(1, k):
                g += t[0, :, i] * dSb[i]
            _tally(P * (rest // k) * k)
            new = np.concatenate([new, g[None]], axis=0)
        rest //= k
        t = new
    return t.reshape(t.shape[0], P)


def integrate_points(S, dS, values, grads) -> np.ndarray:
    """Transpose of :func:`eval_points`; returns per-group contributions ``(G, k^dim)``."""
    tab = _as_tables(S, dS)
    G, W, dim, k = tab.values.shape
    if values is None and grads is None:
        raise ValueError("nothing to integrate")
    v = None if values is None else np.asarray(values, dtype=float).reshape(G, W).T.reshape(-1)
    g = None
    if grads is not None:
        g = np.asarray(grads, dtype=float).reshape(G, W, dim).transpose(2, 1, 0).reshape(dim, -1)
    return _integrate_points_last(tab, v, g).T


def _integrate_points_last(tab: PointTables, v, g) -> np.ndarray:
    """Transpose of :func:`_eval_points_last`; ``v (P,)``/``g (dim, P)`` may be None; returns ``(k^dim, G)``."""
    G, W, dim, k = tab.values.shape
    P = G * W
    v = None if v is None else v.reshape(1, P)
    g = None if g is None else g[:, None, :]
    rest = 1
    for b in reversed(range(1, dim)):
        Sb = tab.values_last[b]
        nv = None
        if g is not None:
            # the b-derivative path folds into the value path at this stage
            gb, g = g[-1], g[:-1]
            nv = gb[:, None, :] * tab.derivatives_last[b][None]
            _tally(P * rest * k)
            g = (g[:, :, None, :] * Sb[None, None]).reshape(len(g), rest * k, P)
            _tally(len(g) * P * rest * k)
        if v is not None:
            t = v[:, None, :] * Sb[None]
            _tally(P * rest * k)
            nv = t if nv is None else nv + t
        v = nv.reshape(rest * k, P)
        rest *= k
    # x stage: sum each group's W points into its cell coefficients
    out = np.empty((rest, k, G))
    paths = []
    if v is not None:
        paths.append((v.reshape(rest, W, G), tab.values_last[0].reshape(k, W, G)))
    if g is not None:
        paths.append((g[0].reshape(rest, W, G), tab.derivatives_last[0].reshape(k, W, G)))
    for i in range(k):
        acc = None
        for t, T0 in paths:
            c = (t * T0[i]).sum(axis=1)
            acc = c if acc is None else acc + c
        out[:, i] = acc
    _tally(len(paths) * P * rest * k)
    return out.reshape(rest * k, G)


def eval_unstructured_points(shape: ShapeInfo, u: np.ndarray, packed: QuadDataPacked,
                             gradients: bool = True):
    """Evaluate per-entity dofs ``u (n_entities, k^dim)`` at packed points."""
    tab = point_tables(shape, packed)
    return eval_points(tab, None, u.reshape(u.shape[0], -1)[packed.owner], gradients)


def integrate_unstructured_points(shape: ShapeInfo, values, grads, packed: QuadDataPacked,
                                  n_entities: int | None = None) -> np.ndarray:
    """Per-entity contributions ``(n_entities, k^dim)``."""
    n = len(packed.entities) if n_entities is None else n_entities
    if packed.n_groups == 0:
        return np.zeros((n, shape.k ** packed.points.shape[2]))
    per_group = integrate_points(point_tables(shape, packed), None, values, grads)
    return _sum_groups(per_group, packed, n)


def eval_unstructured_face_points(shape: ShapeInfo, u: np.ndarray, dim: int, face: int,
                                  packed: QuadDataPacked):
    """Values and reference gradients ``(G, W, dim)`` at in-face points of face ``face``."""
    a = face // 2
    fv, fdn = reduce_to_face(shape, u.reshape(u.shape[0], *(shape.k,) * dim), dim, face)
    tab = point_tables(shape, packed)
    G = packed.n_groups
    vals, tg = eval_points(tab, None, fv.reshape(fv.shape[0], -1)[packed.owner], True)
    dn, _ = eval_points(tab, None, fdn.reshape(fdn.shape[0], -1)[packed.owner], False)
    grads = np.empty((G, packed.lanes, dim))
    for i, b in enumerate(_face_axes(dim, a)):
        grads[:, :, b] = tg[:, :, i]
    grads[:, :, a] = dn
    return vals, grads


def integrate_unstructured_face_points(shape: ShapeInfo, values, grads, dim: int, face: int,
                                       packed: QuadDataPacked, n_entities: int | None = None) -> np.ndarray:
    a = face // 2
    tab = point_tables(shape, packed)
    n = len(packed.entities) if n_entities is None else n_entities
    fshape = (n,) + (shape.k,) * (dim - 1)
    tang = _face_axes(dim, a)
    fv = _sum_groups(integrate_points(tab, None, values, None if grads is None else grads[:, :, tang]),
                     packed, n)
    fdn = None
    if grads is not None:
        fdn = _sum_groups(integrate_points(tab, None, grads[:, :, a], None), packed, n).reshape(fshape)
    return expand_from_face(shape, fv.reshape(fshape), fdn, dim, face).reshape(n, -1)


# -- value / normal-derivative face paths (flux terms) ---------------------------

def eval_face_points_value_normal(shape: ShapeInfo, u: np.ndarray, dim: int, face: int,
                                  packed: QuadDataPacked):
    """Values and reference normal derivatives ``(G, W)`` at packed in-face points."""
    fv, fdn = reduce_to_face(shape, u.reshape(u.shape[0], *(shape.k,) * dim), dim, face)
    tab = point_tables(shape, packed)
    v, _ = eval_points(tab, None, fv.reshape(fv.shape[0], -1)[packed.owner], False)
    dn, _ = eval_points(tab, None, fdn.reshape(fdn.shape[0], -1)[packed.owner], False)
    return v, dn


def integrate_face_points_value_normal(shape: ShapeInfo, cv, cdn, dim: int, face: int,
                                       packed: QuadDataPacked, n_entities: int) -> np.ndarray:
    tab = point_tables(shape, packed)
    shp = (n_entities,) + (shape.k,) * (dim - 1)
    fv = _sum_groups(integrate_points(tab, None, cv, None), packed, n_entities).reshape(shp)
    fdn = _sum_groups(integrate_points(tab, None, cdn, None), packed, n_entities).reshape(shp)
    return expand_from_face(shape, fv, fdn, dim, face).reshape(n_entities, -1)
