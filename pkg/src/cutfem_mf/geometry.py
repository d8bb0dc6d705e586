"""Level-set geometry: spheres, planes, their min-unions and complements.

The physical domain is ``{x : phi(x) < 0}``. All level sets here are
1-Lipschitz (signed distance or min of signed distances), which the box
bounds and classification rely on.
"""
from __future__ import annotations

import math

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_GRADIENT = 1e-10
TIE_TOL = 1e-12


class DegenerateGradientError(ValueError):
    """Raised when the level-set gradient vanishes at the query point."""


class CellCategory(enum.IntEnum):
    INSIDE = 0
    INTERSECTED = 1
    OUTSIDE = 2


class FaceCategory(enum.IntEnum):
    INSIDE = 0
    CUT = 1
    OUTSIDE = 2


class LevelSet:
    """Base class. Subclasses evaluate on arrays of shape ``(..., d)``."""

    dim: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float]:
        """Enclosure ``[min, max]`` of phi over the (possibly flat) box."""
        raise NotImplementedError

    def monotone_sign(self, lo: np.ndarray, hi: np.ndarray, axis: int) -> int:
        """+1/-1 if phi is monotone along ``axis`` on the box, else 0."""
        raise NotImplementedError

    def restrict(self, lo: np.ndarray, hi: np.ndarray) -> "LevelSet":
        """Cheaper level set agreeing with ``self`` on the box."""
        return self

    def to_config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Sphere(LevelSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def __call__(self, x):
        diff = np.asarray(x, dtype=float) - self.center
        return np.sqrt(np.einsum("...i,...i->...", diff, diff)) - self.radius

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - self.center
        r = np.sqrt(np.einsum("...i,...i->...", diff, diff))[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return diff / r

    def bounds(self, lo, hi):
        c = self.center
        near = np.clip(c, lo, hi)
        far = np.maximum(np.abs(lo - c), np.abs(hi - c))
        dn = near - c
        return (math.sqrt(float(dn @ dn)) - self.radius,
                math.sqrt(float(far @ far)) - self.radius)

    def monotone_sign(self, lo, hi, axis):
        c = self.center[axis]
        if lo[axis] >= c and hi[axis] > c:
            return 1
        if hi[axis] <= c and lo[axis] < c:
            return -1
        return 0

    def to_config(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": float(self.radius)}


@dataclass(frozen=True, eq=False)
class Plane(LevelSet):
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("plane normal must have unit length")
        object.__setattr__(self, "normal", n)

    @property
    def dim(self) -> int:
        return self.normal.shape[0]

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.normal, x.shape).copy()

    def bounds(self, lo, hi):
        a = self.normal * lo
        b = self.normal * hi
        return (float(np.minimum(a, b).sum() - self.offset),
                float(np.maximum(a, b).sum() - self.offset))

    def monotone_sign(self, lo, hi, axis):
        # constant along the axis counts as (non-strictly) monotone
        return -1 if self.normal[axis] < 0 else 1

    def to_config(self):
        return {"type": "plane", "normal": self.normal.tolist(), "offset": float(self.offset)}


@dataclass(frozen=True, eq=False)
class Union(LevelSet):
    members: tuple
    _tree: object = field(default=None, repr=False)

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("union needs at least one member")
        object.__setattr__(self, "members", members)
        if len(members) > 16 and all(isinstance(m, Sphere) for m in members):
            centers = np.array([m.center for m in members])
            radii = np.array([m.radius for m in members])
            object.__setattr__(self, "_tree", (cKDTree(centers), centers, radii))

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def _values(self, x):
        return np.stack([m(x) for m in self.members], axis=-1)

    def _sphere_cloud_min(self, x):
        tree, centers, radii = self._tree
        flat = x.reshape(-1, x.shape[-1])
        kq = min(16, len(radii))
        dist, idx = tree.query(flat, k=kq)
        vals = dist - radii[idx]
        best = vals.min(axis=1)
        # lowest member index among near-ties
        tied = np.where(vals <= best[:, None] + TIE_TOL, idx, len(radii))
        arg = tied.min(axis=1)
        # any member beyond the kq-th neighbour is at least dist_k - r_max
        unsure = dist[:, -1] - radii.max() <= best + TIE_TOL
        if np.any(unsure):
            sub = flat[unsure]
            allv = np.linalg.norm(sub[:, None, :] - centers[None], axis=-1) - radii
            b = allv.min(axis=1)
            best[unsure] = b
            arg[unsure] = np.argmax(allv <= b[:, None] + TIE_TOL, axis=1)
        return best.reshape(x.shape[:-1]), arg.reshape(x.shape[:-1])

    def _active(self, x):
        """Value and lowest-index argmin member (ties within TIE_TOL)."""
        x = np.asarray(x, dtype=float)
        if self._tree is not None:
            return self._sphere_cloud_min(x)
        vals = self._values(x)
        best = vals.min(axis=-1)
        arg = np.argmax(vals <= best[..., None] + TIE_TOL, axis=-1)
        return best, arg

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self._tree is not None:
            return self._sphere_cloud_min(x)[0]
        return self._values(x).min(axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        _, arg = self._active(x)
        out = np.empty(x.shape, dtype=float)
        for i in np.unique(arg):
            sel = arg == i
            out[sel] = self.members[int(i)].gradient(x[sel])
        return out

    def _relevant(self, lo, hi):
        if self._tree is not None:
            tree, centers, radii = self._tree
            mid = 0.5 * (lo + hi)
            half = 0.5 * float(np.linalg.norm(hi - lo))
            d0, _ = tree.query(mid)
            # upper bound on the min over the box, then keep members that can reach it
            reach = d0 + half + half + radii.max() - radii.min()
            cand = tree.query_ball_point(mid, reach + 1e-12)
            cand = sorted(cand)
            members = [self.members[i] for i in cand]
        else:
            members = list(self.members)
        bds = [m.bounds(lo, hi) for m in members]
        top = min(b[1] for b in bds)
        return [m for m, b in zip(members, bds) if b[0] <= top]

    def bounds(self, lo, hi):
        rel = self._relevant(lo, hi)
        bds = [m.bounds(lo, hi) for m in rel]
        return min(b[0] for b in bds), min(b[1] for b in bds)

    def monotone_sign(self, lo, hi, axis):
        signs = {m.monotone_sign(lo, hi, axis) for m in self._relevant(lo, hi)}
        if len(signs) == 1:
            return signs.pop()
        return 0

    def restrict(self, lo, hi):
        rel = self._relevant(lo, hi)
        if len(rel) == 1:
            return rel[0]
        return Union(tuple(rel))

    def to_config(self):
        return {"type": "union", "members": [m.to_config() for m in self.members]}


@dataclass(frozen=True, eq=False)
class Complement(LevelSet):
    """``-phi``: swaps the inside and outside of ``base``."""

    base: LevelSet

    @property
    def dim(self) -> int:
        return self.base.dim

    def __call__(self, x):
        return -self.base(x)

    def gradient(self, x):
        return -self.base.gradient(x)

    def bounds(self, lo, hi):
        fmin, fmax = self.base.bounds(lo, hi)
        return -fmax, -fmin

    def monotone_sign(self, lo, hi, axis):
        return -self.base.monotone_sign(lo, hi, axis)

    def restrict(self, lo, hi):
        return Complement(self.base.restrict(lo, hi))

    def to_config(self):
        return {"type": "complement", "base": self.base.to_config()}


def eval_level_set(ls: LevelSet, x) -> np.ndarray:
    return ls(np.asarray(x, dtype=float))


def eval_level_set_gradient(ls: LevelSet, x) -> np.ndarray:
    g = ls.gradient(np.asarray(x, dtype=float))
    norm = np.linalg.norm(g, axis=-1)
    if np.any(~np.isfinite(norm)) or np.any(norm < DEGENERATE_GRADIENT):
        raise DegenerateGradientError("level-set gradient vanishes at query point")
    return g


def sample_grid(lo, hi, n_per_dim: int) -> np.ndarray:
    """Equispaced tensor sample points (vertices included) in a box.

    Flat directions (``lo == hi``) contribute a single coordinate.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    t = np.linspace(0.0, 1.0, n_per_dim)
    axes = [np.array([lo[a]]) if hi[a] == lo[a] else lo[a] + (hi[a] - lo[a]) * t
            for a in range(lo.shape[0])]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _category_from_values(values: np.ndarray, eps: float) -> int:
    if np.all(values < -eps):
        return 0
    if np.all(values > eps):
        return 2
    return 1


def classify_cell(ls: LevelSet, lo, hi, degree: int = 1) -> CellCategory:
    """Classify a box from phi on the ``(degree+2)^d`` equispaced sample grid."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    h = float(np.max(hi - lo))
    pts = sample_grid(lo, hi, degree + 2)
    return CellCategory(_category_from_values(ls(pts), 1e-12 * h))


def classify_face(ls: LevelSet, lo, hi, degree: int = 1) -> FaceCategory:
    """Same as :func:`classify_cell` for a flat box (one direction has lo == hi)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    h = float(np.max(hi - lo))
    pts = sample_grid(lo, hi, degree + 2)
    return FaceCategory(_category_from_values(ls(pts), 1e-12 * h))


@dataclass(frozen=True)
class ManufacturedSolution:
    """Radial solution ``u = cos(omega R) - cos(omega r)`` vanishing on the sphere."""

    omega: float = np.pi
    radius: float = 1.0
    dim: int = 3

    def u(self, x):
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        return np.cos(self.omega * self.radius) - np.cos(self.omega * r)

    def grad_u(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        # d/dr = omega sin(omega r) = omega^2 r sinc(omega r)
        return self.omega ** 2 * np.sinc(self.omega * r / np.pi) * x

    def f(self, x):
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        w = self.omega
        return -w ** 2 * (np.cos(w * r) + (self.dim - 1) * np.sinc(w * r / np.pi))


def sphere_grid(n: int, lo: float = -1.0, hi: float = 1.0, radius_factor: float = 0.6) -> Union:
    """``n^3`` equal spheres on a regular grid; neighbours overlap for factor > 0.5."""
    if n < 1:
        raise ValueError("sphere_grid needs n >= 1")
    s = (hi - lo) / n
    c1 = lo + s * (np.arange(n) + 0.5)
    centers = np.stack(np.meshgrid(c1, c1, c1, indexing="ij"), axis=-1).reshape(-1, 3)
    r = radius_factor * s
    return Union(tuple(Sphere(c, r) for c in centers))


def sphere_random(n: int, seed: int, r_min: float = 0.15, r_max: float = 0.35,
                  bound: float = 1.0) -> Union:
    """``n`` spheres with random centres and radii, all contained in ``[-bound, bound]^3``."""
    if n < 1:
        raise ValueError("sphere_random needs n >= 1")
    rng = np.random.default_rng(seed)
    radii = rng.uniform(r_min, r_max, size=n)
    centers = rng.uniform(-1.0, 1.0, size=(n, 3)) * (bound - radii)[:, None]
    return Union(tuple(Sphere(c, r) for c, r in zip(centers, radii)))


def level_set_from_config(cfg: dict) -> LevelSet:
    kind = cfg.get("type")
    if kind == "sphere":
        return Sphere(np.asarray(cfg["center"], dtype=float), float(cfg["radius"]))
    if kind == "plane":
        return Plane(np.asarray(cfg["normal"], dtype=float), float(cfg.get("offset", 0.0)))
    if kind == "union":
        return Union(tuple(level_set_from_config(m) for m in cfg["members"]))
    if kind == "sphere_grid":
        return sphere_grid(int(cfg["n"]), radius_factor=float(cfg.get("radius_factor", 0.6)))
    if kind == "sphere_random":
        return sphere_random(int(cfg["n"]), int(cfg.get("seed", 0)))
    if kind == "complement":
        return Complement(level_set_from_config(cfg["base"]))
    raise ValueError(f"unknown geometry type {kind!r}")


def union(members: Sequence[LevelSet]) -> Union:
    return Union(tuple(members))
