"""Structured Gauss rules and level-set adapted rules on cut cells and faces.

Cut rules use dimension reduction: pick a height direction in which every
active level set is monotone, integrate the one-dimensional pieces along
each height line exactly with Gauss rules, and recurse on the base box where
the level sets restricted to the bottom and top faces become the new
interfaces. A single line without a monotone function is scanned for up to
``MAX_LINE_ROOTS`` sign changes per function; other boxes on which no monotone
height direction exists are bisected.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .geometry import Complement, LevelSet

log = logging.getLogger(__name__)

MAX_SUBDIV = 4
BISECT_WIDTH = 1e-8
NEWTON_TOL = 1e-13
NEWTON_STEPS = 5
MIN_SLOPE = 0.3
SECTIONS = 16
SCAN_INTERVALS = 16
MAX_LINE_ROOTS = 4


class RootFindingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Quadrature1D:
    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.points)


@lru_cache(maxsize=None)
def _gauss(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_rule(n: int) -> Quadrature1D:
    """``n``-point Gauss-Legendre rule on [0, 1]."""
    if not 1 <= n <= 32:
        raise ValueError(f"unsupported number of Gauss points: {n}")
    x, w = _gauss(n)
    return Quadrature1D(x.copy(), w.copy())


@dataclass(frozen=True)
class TensorQuadrature:
    rule: Quadrature1D
    dim: int

    @property
    def points(self) -> np.ndarray:
        """Points with x varying fastest."""
        grids = np.meshgrid(*([self.rule.points] * self.dim), indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=-1)

    @property
    def weights(self) -> np.ndarray:
        w = self.rule.weights
        out = w
        for _ in range(self.dim - 1):
            out = np.multiply.outer(w, out)
        return out.ravel()


@dataclass
class CutCellQuadrature:
    """Points in reference coordinates of the cell and physical weights (JxW)."""

    points: np.ndarray
    weights: np.ndarray
    flagged: bool = False

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass
class SurfaceQuadrature:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    flagged: bool = False

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass
class CutFaceQuadrature:
    """In-face reference points (``d-1`` coordinates, ascending axis order)."""

    points: np.ndarray
    weights: np.ndarray
    flagged: bool = False

    @property
    def size(self) -> int:
        return len(self.weights)


class _Fn:
    """Level set with some coordinates pinned, plus a required sign (0 = any)."""

    __slots__ = ("ls", "axes", "vals", "sign")

    def __init__(self, ls, axes=(), vals=(), sign=0):
        self.ls = ls
        self.axes = tuple(axes)
        self.vals = tuple(vals)
        self.sign = sign

    def pin(self, axis, value, sign):
        return _Fn(self.ls, self.axes + (axis,), self.vals + (value,), sign)

    def _fix(self, x):
        if self.axes:
            x = np.array(x, dtype=float, copy=True)
            for a, v in zip(self.axes, self.vals):
                x[..., a] = v
        return x

    def __call__(self, x):
        return self.ls(self._fix(x))

    def gradient(self, x):
        return self.ls.gradient(self._fix(x))

    def box(self, lo, hi):
        lo = lo.copy()
        hi = hi.copy()
        for a, v in zip(self.axes, self.vals):
            lo[a] = v
            hi[a] = v
        return lo, hi

    def bounds(self, lo, hi):
        return self.ls.bounds(*self.box(lo, hi))

    def monotone_sign(self, lo, hi, axis):
        return self.ls.monotone_sign(*self.box(lo, hi), axis)

    def restricted(self, lo, hi):
        return _Fn(self.ls.restrict(*self.box(lo, hi)), self.axes, self.vals, self.sign)


def _tensor_points(lo, hi, free, q):
    x, w = _gauss(q)
    d = len(lo)
    if not free:
        return lo[None, :].copy(), np.ones(1)
    grids = np.meshgrid(*([x] * len(free)), indexing="ij")
    pts = np.repeat(lo[None, :], grids[0].size, axis=0)
    wts = np.ones(grids[0].size)
    wg = np.meshgrid(*([w] * len(free)), indexing="ij")
    for i, a in enumerate(free):
        length = hi[a] - lo[a]
        pts[:, a] = lo[a] + length * grids[i].ravel()
        wts *= wg[i].ravel() * length
    return pts, wts


def _find_roots(fn, base, axis, a, b, fa, fb):
    """Root of ``fn`` on ``[a, b]`` along ``axis`` for each base point.

    Requires a sign change between the ends. The bracket is narrowed by
    multisection (``SECTIONS`` subintervals per round) to ``BISECT_WIDTH``
    relative width, then polished with safeguarded Newton steps.
    """
    n = len(base)
    lo = np.full(n, a, dtype=float)
    width = float(b - a)
    neg_at_lo = (fa < 0)[:, None]
    frac = np.arange(1, SECTIONS) / SECTIONS
    x = np.repeat(base, SECTIONS - 1, axis=0)
    while width > (b - a) * BISECT_WIDTH:
        ts = lo[:, None] + width * frac[None, :]
        x[:, axis] = ts.ravel()
        fs = fn(x).reshape(n, SECTIONS - 1)
        # first sample whose sign differs from the left end
        changed = (fs < 0) != neg_at_lo
        first = np.where(changed.any(axis=1), changed.argmax(axis=1), SECTIONS - 1)
        lo = lo + width * first / SECTIONS
        width /= SECTIONS
    hi = lo + width
    t = lo + 0.5 * width
    tol = NEWTON_TOL * (b - a)
    xl = base.copy()
    for _ in range(NEWTON_STEPS):
        xl[:, axis] = t
        g = fn.gradient(xl)[:, axis]
        f = fn(xl)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(g != 0, f / g, 0.0)
        t_new = np.clip(t - step, lo, hi)
        done = np.all(np.abs(t_new - t) <= tol)
        t = t_new
        if done:
            break
    if np.any(~np.isfinite(t)):
        raise RootFindingError("root finder produced non-finite values")
    return t


def _prune(fns, lo, hi):
    """Drop level sets of uniform sign; ``None`` if one has the wrong sign."""
    keep = []
    for f in fns:
        fmin, fmax = f.bounds(lo, hi)
        if fmin > 0 or fmax < 0:
            s = 1 if fmin > 0 else -1
            if f.sign != 0 and f.sign != s:
                return None
            continue
        keep.append(f)
    return keep


def _slope_quality(fns, lo, hi, free, k):
    """Smallest ``|d_k f| / |grad_free f|`` over a 3-point sample grid of the box."""
    pts, _ = _tensor_points(lo, hi, free, 3)
    idx = list(free)
    worst = np.inf
    for f in fns:
        g = f.gradient(pts)
        gn = np.linalg.norm(g[:, idx], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(gn > 0, np.abs(g[:, k]) / gn, 0.0)
        worst = min(worst, float(r.min()))
    return worst


def _height_direction(fns, lo, hi, free, min_slope=0.0):
    center = 0.5 * (lo + hi)
    g = np.abs(fns[0].gradient(center[None, :])[0])
    for a in sorted(free, key=lambda a: (-g[a], a)):
        signs = [f.monotone_sign(lo, hi, a) for f in fns]
        if all(s != 0 for s in signs):
            if min_slope > 0 and _slope_quality(fns, lo, hi, free, a) < min_slope:
                continue
            return a, signs
    return None, None


def _children(lo, hi, free):
    mid = 0.5 * (lo + hi)
    out = []
    for bits in range(2 ** len(free)):
        clo, chi = lo.copy(), hi.copy()
        for i, a in enumerate(free):
            if bits >> i & 1:
                clo[a] = mid[a]
            else:
                chi[a] = mid[a]
        out.append((clo, chi))
    return out


class _Builder:
    def __init__(self, q, max_subdiv):
        self.q = q
        self.max_subdiv = max_subdiv
        self.flagged = False

    def _direction(self, fns, lo, hi, free, depth):
        # steep interfaces make the height function singular; subdivide while allowed
        if depth < self.max_subdiv:
            return _height_direction(fns, lo, hi, free, MIN_SLOPE)
        return _height_direction(fns, lo, hi, free)

    # volume ------------------------------------------------------------------
    def volume(self, fns, lo, hi, free, depth=0, domain=None):
        """Rule for the part of the box where every signed function has its sign.

        ``domain`` is an extra signed function that only filters line segments;
        its pieces are among the unsigned ``fns`` (members of a min-union).
        """
        d = len(lo)
        empty = np.empty((0, d)), np.empty(0)
        if domain is not None:
            fmin, fmax = domain.bounds(lo, hi)
            if fmin > 0 or fmax < 0:
                uniform = 1 if fmin > 0 else -1
                return _tensor_points(lo, hi, free, self.q) if uniform == domain.sign else empty
            domain = domain.restricted(lo, hi)
        fns = _prune(fns, lo, hi)
        if fns is None:
            return empty
        fns = [f.restricted(lo, hi) for f in fns]
        if not fns and domain is not None:
            # no member crosses the box, so the domain sign is constant on it
            c = 0.5 * (lo + hi)
            return _tensor_points(lo, hi, free, self.q) if domain.sign * domain(c[None, :])[0] > 0 else empty
        if not fns or not free:
            return _tensor_points(lo, hi, free, self.q)
        k, signs = self._direction(fns, lo, hi, free, depth)
        if k is None and len(free) == 1:
            scanned = self._scan_line(fns, lo, hi, free[0], domain)
            if scanned is not None:
                return scanned
        if k is None:
            if depth < self.max_subdiv:
                parts = [self.volume(fns, clo, chi, free, depth + 1, domain)
                         for clo, chi in _children(lo, hi, free)]
                return (np.concatenate([p for p, _ in parts]),
                        np.concatenate([w for _, w in parts]))
            return self._volume_fallback(fns, lo, hi, free, domain)
        base_fns = []
        for f, sig in zip(fns, signs):
            if f.sign == 0:
                s_lo = s_hi = 0
            elif f.sign * sig > 0:
                s_lo, s_hi = 0, f.sign
            else:
                s_lo, s_hi = f.sign, 0
            base_fns.append(f.pin(k, lo[k], s_lo))
            base_fns.append(f.pin(k, hi[k], s_hi))
        blo, bhi = lo.copy(), hi.copy()
        bhi[k] = blo[k]
        bfree = tuple(a for a in free if a != k)
        bpts, bw = self.volume(base_fns, blo, bhi, bfree, depth)
        if len(bw) == 0:
            return bpts, bw
        return self._lines(fns, bpts, bw, k, lo[k], hi[k], domain)

    def _lines(self, fns, bpts, bw, k, a, b, domain=None):
        n = len(bw)
        cuts = [np.full(n, a), np.full(n, b)]
        for f in fns:
            x = bpts.copy()
            x[:, k] = a
            fa = f(x)
            x[:, k] = b
            fb = f(x)
            has = fa * fb < 0
            r = np.full(n, b)
            if np.any(has):
                r[has] = _find_roots(f, bpts[has], k, a, b, fa[has], fb[has])
            cuts.append(r)
        cuts = np.sort(np.stack(cuts, axis=1), axis=1)
        left = cuts[:, :-1]
        length = cuts[:, 1:] - left
        mids = left + 0.5 * length
        ok = length > 0
        for f in fns + ([domain] if domain is not None else []):
            if f.sign == 0:
                continue
            for j in range(mids.shape[1]):
                x = bpts.copy()
                x[:, k] = mids[:, j]
                ok[:, j] &= f.sign * f(x) > 0
        gx, gw = _gauss(self.q)
        li, ji = np.nonzero(ok)
        if len(li) == 0:
            return np.empty((0, bpts.shape[1])), np.empty(0)
        pts = np.repeat(bpts[li], self.q, axis=0)
        pts[:, k] = (left[li, ji][:, None] + length[li, ji][:, None] * gx[None, :]).ravel()
        wts = (bw[li][:, None] * length[li, ji][:, None] * gw[None, :]).ravel()
        return pts, wts

    def _scan_line(self, fns, lo, hi, k, domain=None):
        """Segments of one line where every signed function has its sign.

        Roots are bracketed on an equispaced scan; ``None`` if some function
        changes sign more than ``MAX_LINE_ROOTS`` times.
        """
        a, b = float(lo[k]), float(hi[k])
        ts = np.linspace(a, b, SCAN_INTERVALS + 1)
        x = np.repeat(lo[None, :], len(ts), axis=0)
        x[:, k] = ts
        cuts = [a, b]
        base = lo[None, :]
        for f in fns:
            v = f(x)
            change = np.flatnonzero((v[:-1] < 0) != (v[1:] < 0))
            if len(change) > MAX_LINE_ROOTS:
                return None
            for i in change:
                cuts.append(float(_find_roots(f, base, k, ts[i], ts[i + 1], v[i:i + 1], v[i + 1:i + 2])[0]))
        cuts = np.unique(np.clip(cuts, a, b))
        gx, gw = _gauss(self.q)
        pts, wts = [], []
        for s, e in zip(cuts[:-1], cuts[1:]):
            mid = lo.copy()
            mid[k] = 0.5 * (s + e)
            signed = fns + ([domain] if domain is not None else [])
            if all(f.sign == 0 or f.sign * f(mid[None, :])[0] > 0 for f in signed):
                p = np.repeat(lo[None, :], self.q, axis=0)
                p[:, k] = s + (e - s) * gx
                pts.append(p)
                wts.append((e - s) * gw)
        if not pts:
            return np.empty((0, len(lo))), np.empty(0)
        return np.concatenate(pts), np.concatenate(wts)

    def _volume_fallback(self, fns, lo, hi, free, domain=None):
        self.flagged = True
        pts, wts = _tensor_points(lo, hi, free, 2 * self.q)
        ok = np.ones(len(wts), dtype=bool)
        for f in fns + ([domain] if domain is not None else []):
            if f.sign != 0:
                ok &= f.sign * f(pts) > 0
        return pts[ok], wts[ok]

    # surface -------------------------------------------------------------------
    def surface(self, fn, lo, hi, free, depth=0):
        d = len(lo)
        empty = (np.empty((0, d)), np.empty(0), np.empty((0, d)))
        fmin, fmax = fn.bounds(lo, hi)
        if fmin > 0 or fmax < 0:
            return empty
        fn = fn.restricted(lo, hi)
        k, signs = self._direction([fn], lo, hi, free, depth)
        if k is None:
            if depth < self.max_subdiv:
                parts = [self.surface(fn, clo, chi, free, depth + 1)
                         for clo, chi in _children(lo, hi, free)]
                return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))
            self.flagged = True
            center = 0.5 * (lo + hi)
            g = np.abs(fn.gradient(center[None, :])[0])
            k = max(free, key=lambda a: g[a])
            bpts, bw = _tensor_points(*self._flat(lo, hi, k), tuple(a for a in free if a != k), self.q)
        else:
            sig = signs[0]
            base_fns = [fn.pin(k, lo[k], -sig), fn.pin(k, hi[k], sig)]
            blo, bhi = self._flat(lo, hi, k)
            bpts, bw = self.volume(base_fns, blo, bhi, tuple(a for a in free if a != k), depth)
        if len(bw) == 0:
            return empty
        x = bpts.copy()
        x[:, k] = lo[k]
        fa = fn(x)
        x[:, k] = hi[k]
        fb = fn(x)
        has = fa * fb < 0
        if not np.any(has):
            return empty
        bpts, bw = bpts[has], bw[has]
        t = _find_roots(fn, bpts, k, lo[k], hi[k], fa[has], fb[has])
        pts = bpts.copy()
        pts[:, k] = t
        g = fn.gradient(pts)
        gn = np.linalg.norm(g, axis=1)
        wts = bw * gn / np.abs(g[:, k])
        return pts, wts, g / gn[:, None]

    @staticmethod
    def _flat(lo, hi, k):
        blo, bhi = lo.copy(), hi.copy()
        bhi[k] = blo[k]
        return blo, bhi


def _check_cut(ls, lo, hi, what):
    fmin, fmax = ls.bounds(lo, hi)
    if fmin > 0 or fmax < 0:
        raise ValueError(f"{what} is not intersected by the interface")


def _smooth_pieces(ls) -> list:
    """Smooth level sets that a union/complement expression is built from."""
    if isinstance(ls, Complement):
        return _smooth_pieces(ls.base)
    members = getattr(ls, "members", None)
    if members is None:
        return [ls]
    return [leaf for m in members for leaf in _smooth_pieces(m)]


def _volume_functions(ls, lo, hi):
    """``(fns, domain)`` for ``{phi < 0}``.

    A union (possibly under complements) is split into its smooth pieces, each
    treated as an unsigned interface with its own monotone directions; the
    whole expression only decides which segments are inside. A single smooth
    level set is one signed function.
    """
    r = ls.restrict(lo, hi)
    pieces = _smooth_pieces(r)
    if len(pieces) == 1:
        return [_Fn(r, sign=-1)], None
    return [_Fn(m) for m in pieces], _Fn(r, sign=-1)


def _box(cell_lo, cell_hi):
    return np.asarray(cell_lo, dtype=float), np.asarray(cell_hi, dtype=float)


def generate_cut_volume_quadrature(ls: LevelSet, cell_lo, cell_hi, n_q: int,
                                   max_subdiv: int = MAX_SUBDIV) -> CutCellQuadrature:
    """Rule for ``cell cap {phi < 0}``; points in reference coordinates of the cell."""
    lo, hi = _box(cell_lo, cell_hi)
    _check_cut(ls, lo, hi, "cell")
    b = _Builder(n_q, max_subdiv)
    free = tuple(range(len(lo)))
    fns, domain = _volume_functions(ls, lo, hi)
    pts, wts = b.volume(fns, lo, hi, free, domain=domain)
    keep = wts > 0
    ref = (pts[keep] - lo) / (hi - lo)
    return CutCellQuadrature(np.clip(ref, 0.0, 1.0), wts[keep], b.flagged)


def generate_surface_quadrature(ls: LevelSet, cell_lo, cell_hi, n_q: int,
                                max_subdiv: int = MAX_SUBDIV) -> SurfaceQuadrature:
    """Rule for ``cell cap {phi = 0}`` with unit normals ``grad phi / |grad phi|``."""
    lo, hi = _box(cell_lo, cell_hi)
    _check_cut(ls, lo, hi, "cell")
    b = _Builder(n_q, max_subdiv)
    pts, wts, nrm = b.surface(_Fn(ls), lo, hi, tuple(range(len(lo))))
    keep = wts > 0
    ref = (pts[keep] - lo) / (hi - lo)
    return SurfaceQuadrature(np.clip(ref, 0.0, 1.0), wts[keep], nrm[keep], b.flagged)


def generate_cut_face_quadrature(ls: LevelSet, face_lo, face_hi, n_q: int,
                                 max_subdiv: int = MAX_SUBDIV) -> CutFaceQuadrature:
    """Rule for ``face cap {phi < 0}``. The face is a box with one flat direction."""
    lo, hi = _box(face_lo, face_hi)
    flat = np.flatnonzero(hi == lo)
    if len(flat) != 1:
        raise ValueError("face box must be flat in exactly one direction")
    _check_cut(ls, lo, hi, "face")
    normal = int(flat[0])
    free = tuple(a for a in range(len(lo)) if a != normal)
    b = _Builder(n_q, max_subdiv)
    fns, domain = _volume_functions(ls, lo, hi)
    pts, wts = b.volume(fns, lo, hi, free, domain=domain)
    keep = wts > 0
    ext = (hi - lo)[list(free)]
    ref = (pts[keep][:, list(free)] - lo[list(free)]) / ext
    return CutFaceQuadrature(np.clip(ref, 0.0, 1.0), wts[keep], b.flagged)


def write_rules_csv(path, rows: Iterable[tuple]) -> None:
    """Dump rules as CSV rows ``(cell_id, kind, x, y, z, jxw, nx, ny, nz)``.

    ``rows`` yields ``(cell_id, kind, rule)`` with ``kind`` in vol/surf/face.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "kind", "x", "y", "z", "jxw", "nx", "ny", "nz"])
        for cell_id, kind, rule in rows:
            pts = np.zeros((rule.size, 3))
            pts[:, :rule.points.shape[1]] = rule.points
            nrm = np.zeros((rule.size, 3))
            if isinstance(rule, SurfaceQuadrature):
                nrm[:, :rule.normals.shape[1]] = rule.normals
            for p, jxw, n in zip(pts, rule.weights, nrm):
                w.writerow([cell_id, kind, *(repr(float(v)) for v in p), repr(float(jxw)),
                            *(repr(float(v)) for v in n)])
