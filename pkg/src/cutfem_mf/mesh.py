"""Cartesian background mesh, CG/DG DoF numbering, batching and partitioning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import CellCategory, FaceCategory, LevelSet, sample_grid

VALID_LANES = (1, 2, 4, 8, 16)


class IsolatedCutCellError(RuntimeError):
    """An intersected cell has no active face neighbour to stabilise against."""


@dataclass(frozen=True)
class CartesianMesh:
    """Axis-aligned box split into ``cells_per_dim`` cells.

    Cells are numbered lexicographically with x fastest. Faces are grouped by
    normal direction; inside a group they are lexicographic as well, with
    ``n_a + 1`` positions along the normal direction ``a``.
    """

    origin: np.ndarray
    extent: np.ndarray
    cells_per_dim: tuple
    refinements: int = 0

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=float))
        object.__setattr__(self, "cells_per_dim", tuple(int(n) for n in self.cells_per_dim))
        if any(n < 1 for n in self.cells_per_dim):
            raise ValueError("cells_per_dim must be >= 1 in every direction")
        if np.any(self.extent <= 0):
            raise ValueError("extent must be positive")

    @property
    def dim(self) -> int:
        return len(self.cells_per_dim)

    @property
    def h(self) -> np.ndarray:
        return self.extent / np.asarray(self.cells_per_dim)

    @property
    def h_min(self) -> float:
        return float(self.h.min())

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells_per_dim))

    def cell_multi_index(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        return np.stack(np.unravel_index(cells, self.cells_per_dim, order="F"), axis=-1)

    def cell_index(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi[..., a] for a in range(self.dim)),
                                    self.cells_per_dim, order="F")

    def cell_bounds(self, cells) -> tuple[np.ndarray, np.ndarray]:
        mi = self.cell_multi_index(cells)
        lo = self.origin + mi * self.h
        return lo, lo + self.h

    # faces -----------------------------------------------------------------
    def _face_shape(self, a: int) -> tuple:
        return tuple(n + 1 if b == a else n for b, n in enumerate(self.cells_per_dim))

    @property
    def face_offsets(self) -> np.ndarray:
        counts = [int(np.prod(self._face_shape(a))) for a in range(self.dim)]
        return np.concatenate([[0], np.cumsum(counts)])

    @property
    def n_faces(self) -> int:
        return int(self.face_offsets[-1])

    def face_direction(self, faces) -> np.ndarray:
        return np.searchsorted(self.face_offsets, np.asarray(faces), side="right") - 1

    def faces_of_direction(self, a: int) -> np.ndarray:
        off = self.face_offsets
        return np.arange(off[a], off[a + 1])

    def face_multi_index(self, faces) -> tuple[np.ndarray, np.ndarray]:
        faces = np.asarray(faces)
        dirs = self.face_direction(faces)
        mi = np.zeros(faces.shape + (self.dim,), dtype=np.int64)
        for a in range(self.dim):
            sel = dirs == a
            local = faces[sel] - self.face_offsets[a]
            mi[sel] = np.stack(np.unravel_index(local, self._face_shape(a), order="F"), axis=-1)
        return dirs, mi

    def face_cells(self, faces) -> tuple[np.ndarray, np.ndarray]:
        """Cells on the minus (lower) and plus side; -1 outside the box."""
        dirs, mi = self.face_multi_index(faces)
        n = np.asarray(self.cells_per_dim)
        minus = np.full(dirs.shape, -1, dtype=np.int64)
        plus = np.full(dirs.shape, -1, dtype=np.int64)
        for a in range(self.dim):
            sel = dirs == a
            m = mi[sel]
            pos = m[:, a]
            cm = m.copy()
            cm[:, a] = pos - 1
            ok = pos >= 1
            minus_a = np.full(len(m), -1, dtype=np.int64)
            minus_a[ok] = self.cell_index(cm[ok])
            ok2 = pos < n[a]
            plus_a = np.full(len(m), -1, dtype=np.int64)
            plus_a[ok2] = self.cell_index(m[ok2])
            minus[sel] = minus_a
            plus[sel] = plus_a
        return minus, plus

    def face_bounds(self, faces) -> tuple[np.ndarray, np.ndarray]:
        dirs, mi = self.face_multi_index(faces)
        lo = self.origin + mi * self.h
        hi = lo + self.h
        rows = np.arange(len(np.atleast_1d(dirs)))
        hi = np.atleast_2d(hi)
        lo = np.atleast_2d(lo)
        hi[rows, np.atleast_1d(dirs)] = lo[rows, np.atleast_1d(dirs)]
        return lo.reshape(mi.shape), hi.reshape(mi.shape)

    def cell_faces(self, cell: int) -> list[tuple[int, int, int]]:
        """``(face, local_face_number, neighbour)`` for the ``2d`` faces of a cell."""
        mi = self.cell_multi_index(cell)
        out = []
        for a in range(self.dim):
            shape = self._face_shape(a)
            for side in (0, 1):
                fm = mi.copy()
                fm[a] += side
                local = np.ravel_multi_index(tuple(fm), shape, order="F")
                face = int(self.face_offsets[a] + local)
                nm = mi.copy()
                nm[a] += 1 if side else -1
                if 0 <= nm[a] < self.cells_per_dim[a]:
                    nb = int(self.cell_index(nm))
                else:
                    nb = -1
                out.append((face, 2 * a + side, nb))
        return out

    def to_config(self) -> dict:
        return {"origin": self.origin.tolist(), "extent": self.extent.tolist(),
                "cells_per_dim": list(self.cells_per_dim), "refinements": self.refinements}


def build_mesh(origin, extent, n, refinements: int = 0, dim: int = 3) -> CartesianMesh:
    """Mesh with ``n * 2**refinements`` cells per direction."""
    if refinements < 0:
        raise ValueError("refinements must be >= 0")
    n_arr = np.broadcast_to(np.asarray(n, dtype=np.int64), (dim,))
    if np.any(n_arr < 1):
        raise ValueError("n must be >= 1")
    cells = n_arr * 2 ** refinements
    if float(np.prod(cells.astype(float))) >= 2 ** 62:
        raise OverflowError("cell index space overflows 64-bit integers")
    origin = np.broadcast_to(np.asarray(origin, dtype=float), (dim,))
    extent = np.broadcast_to(np.asarray(extent, dtype=float), (dim,))
    return CartesianMesh(origin.copy(), extent.copy(), tuple(int(c) for c in cells), refinements)


# classification ------------------------------------------------------------
def _classify_boxes(ls: LevelSet, lo: np.ndarray, hi: np.ndarray, degree: int,
                    chunk: int = 4096) -> np.ndarray:
    """Vectorised classification of many boxes (cells or flat faces)."""
    n = lo.shape[0]
    out = np.empty(n, dtype=np.int8)
    if n == 0:
        return out
    h = (hi - lo).max(axis=1)
    eps = 1e-12 * h
    half = 0.5 * np.linalg.norm(hi - lo, axis=1)
    phic = ls(0.5 * (lo + hi))
    # 1-Lipschitz level sets: a margin above the half diagonal decides the sign
    sure_in = phic < -(half + eps) * (1 + 1e-12)
    sure_out = phic > (half + eps) * (1 + 1e-12)
    out[sure_in] = CellCategory.INSIDE
    out[sure_out] = CellCategory.OUTSIDE
    todo = np.flatnonzero(~(sure_in | sure_out))
    ref = sample_grid(np.zeros(lo.shape[1]), np.ones(lo.shape[1]), degree + 2)
    for s in range(0, len(todo), chunk):
        idx = todo[s:s + chunk]
        ext = hi[idx] - lo[idx]
        # flat directions collapse onto lo
        pts = lo[idx, None, :] + ref[None, :, :] * ext[:, None, :]
        vals = ls(pts)
        e = eps[idx, None]
        cat = np.full(len(idx), CellCategory.INTERSECTED, dtype=np.int8)
        cat[np.all(vals < -e, axis=1)] = CellCategory.INSIDE
        cat[np.all(vals > e, axis=1)] = CellCategory.OUTSIDE
        out[idx] = cat
    return out


def classify_mesh_cells(mesh: CartesianMesh, ls: LevelSet, degree: int) -> np.ndarray:
    lo, hi = mesh.cell_bounds(np.arange(mesh.n_cells))
    return _classify_boxes(ls, lo, hi, degree)


def classify_mesh_faces(mesh: CartesianMesh, ls: LevelSet, degree: int, faces) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.empty(0, dtype=np.int8)
    lo, hi = mesh.face_bounds(faces)
    return _classify_boxes(ls, lo, hi, degree)


# dof handler -----------------------------------------------------------------
@dataclass
class DofHandler:
    """Degree-of-freedom numbering on the active (inside + intersected) cells.

    ``cell_dofs[i]`` holds the ``k^d`` global indices of active cell
    ``active_cells[i]`` in lexicographic order (x fastest).
    """

    mesh: CartesianMesh
    fe_kind: str
    degree: int
    cell_category: np.ndarray
    active_cells: np.ndarray
    cell_to_active: np.ndarray
    cell_dofs: np.ndarray
    n_dofs: int
    interior_faces: np.ndarray = field(default=None)
    face_minus: np.ndarray = field(default=None)
    face_plus: np.ndarray = field(default=None)
    face_category: np.ndarray = field(default=None)

    @property
    def k(self) -> int:
        return self.degree + 1

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_active(self) -> int:
        return len(self.active_cells)

    def cells_of(self, category: CellCategory) -> np.ndarray:
        return self.active_cells[self.cell_category[self.active_cells] == category]

    @property
    def cut_ratio(self) -> float:
        if self.n_active == 0:
            return 0.0
        return float(np.mean(self.cell_category[self.active_cells] == CellCategory.INTERSECTED))

    def local_dofs(self, cells) -> np.ndarray:
        return self.cell_dofs[self.cell_to_active[np.asarray(cells)]]


def _cg_numbering(mesh: CartesianMesh, active: np.ndarray, p: int) -> tuple[np.ndarray, int]:
    d = mesh.dim
    k = p + 1
    lattice = tuple(n * p + 1 for n in mesh.cells_per_dim)
    mi = mesh.cell_multi_index(active)
    # local ordering x fastest
    loc = np.stack(np.unravel_index(np.arange(k ** d), (k,) * d, order="F"), axis=-1)
    nodes = mi[:, None, :] * p + loc[None, :, :]
    lin = np.ravel_multi_index(tuple(nodes[..., a] for a in range(d)), lattice, order="F")
    uniq, inv = np.unique(lin, return_inverse=True)
    return inv.reshape(lin.shape).astype(np.int64), len(uniq)


def build_dof_handler(mesh: CartesianMesh, ls: LevelSet, fe_kind: str, degree: int,
                      cell_category: np.ndarray | None = None) -> DofHandler:
    fe_kind = fe_kind.lower()
    if fe_kind not in ("cg", "dg"):
        raise ValueError(f"fe_kind must be 'cg' or 'dg', got {fe_kind!r}")
    if not 1 <= degree <= 7:
        raise ValueError("degree must be in 1..7")
    if cell_category is None:
        cell_category = classify_mesh_cells(mesh, ls, degree)
    active = np.flatnonzero(cell_category != CellCategory.OUTSIDE)
    cell_to_active = np.full(mesh.n_cells, -1, dtype=np.int64)
    cell_to_active[active] = np.arange(len(active))
    k = degree + 1
    nloc = k ** mesh.dim
    if fe_kind == "dg":
        cell_dofs = np.arange(len(active) * nloc, dtype=np.int64).reshape(len(active), nloc)
        n_dofs = len(active) * nloc
    else:
        cell_dofs, n_dofs = _cg_numbering(mesh, active, degree)

    faces = np.arange(mesh.n_faces)
    minus, plus = mesh.face_cells(faces)
    both = (minus >= 0) & (plus >= 0)
    both[both] = (cell_to_active[minus[both]] >= 0) & (cell_to_active[plus[both]] >= 0)
    interior = faces[both]
    fcat = classify_mesh_faces(mesh, ls, degree, interior)
    return DofHandler(mesh, fe_kind, degree, cell_category.astype(np.int8), active,
                      cell_to_active, cell_dofs, int(n_dofs), interior, minus[both],
                      plus[both], fcat)


# batches -----------------------------------------------------------------------
@dataclass(frozen=True)
class CellBatch:
    category: CellCategory
    cells: np.ndarray  # length W, -1 marks padding
    mask: np.ndarray

    @property
    def n_filled(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class FaceBatch:
    direction: int
    faces: np.ndarray  # length W, -1 marks padding
    mask: np.ndarray
    ghost: np.ndarray
    inside_flux: np.ndarray
    cut_flux: np.ndarray

    @property
    def local_face_numbers(self) -> tuple[int, int]:
        """Local face numbers on the minus and plus cell."""
        return 2 * self.direction + 1, 2 * self.direction


def _chunk(entities: np.ndarray, lanes: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for s in range(0, len(entities), lanes):
        part = entities[s:s + lanes]
        pad = np.full(lanes, -1, dtype=np.int64)
        pad[:len(part)] = part
        mask = np.zeros(lanes, dtype=bool)
        mask[:len(part)] = True
        out.append((pad, mask))
    return out


def build_cell_batches(handler: DofHandler, lanes: int) -> list[CellBatch]:
    if lanes not in VALID_LANES:
        raise ValueError(f"lanes must be one of {VALID_LANES}")
    batches = []
    for cat in (CellCategory.INSIDE, CellCategory.INTERSECTED):
        for cells, mask in _chunk(handler.cells_of(cat), lanes):
            batches.append(CellBatch(cat, cells, mask))
    batches.sort(key=lambda b: int(b.cells[0]))
    return batches


def build_face_batches(handler: DofHandler, lanes: int,
                       stabilization_faces: np.ndarray | None = None) -> list[FaceBatch]:
    if lanes not in VALID_LANES:
        raise ValueError(f"lanes must be one of {VALID_LANES}")
    faces = handler.interior_faces
    ghost = np.zeros(len(faces), dtype=bool)
    if stabilization_faces is not None and len(stabilization_faces):
        ghost = np.isin(faces, stabilization_faces)
    dg = handler.fe_kind == "dg"
    inside = dg & (handler.face_category == FaceCategory.INSIDE)
    cut = dg & (handler.face_category == FaceCategory.CUT)
    work = ghost | inside | cut
    dirs = handler.mesh.face_direction(faces)
    pos = {int(f): i for i, f in enumerate(faces)}
    batches = []
    for a in range(handler.dim):
        sel = faces[work & (dirs == a)]
        for fs, mask in _chunk(sel, lanes):
            idx = np.array([pos[int(f)] if f >= 0 else -1 for f in fs])
            valid = idx >= 0
            flag = lambda arr: np.where(valid, arr[np.maximum(idx, 0)], False)
            batches.append(FaceBatch(a, fs, mask, flag(ghost), flag(inside), flag(cut)))
    batches.sort(key=lambda b: int(b.faces[0]))
    return batches


def build_batches(handler: DofHandler, lanes: int, stabilization_faces=None):
    return (build_cell_batches(handler, lanes),
            build_face_batches(handler, lanes, stabilization_faces))


# stabilisation ---------------------------------------------------------------------
def select_stabilization_faces(handler: DofHandler,
                               volume_fractions: Mapping[int, float]) -> np.ndarray:
    """One ghost-penalty face per intersected cell, towards its most stable neighbour.

    ``volume_fractions`` maps intersected cells to ``|E cap Omega| / |E|``;
    inside neighbours count as 1. Ties go to the lowest face index.
    """
    mesh = handler.mesh
    cat = handler.cell_category
    chosen = set()
    for cell in handler.cells_of(CellCategory.INTERSECTED):
        best = None
        for face, _, nb in mesh.cell_faces(int(cell)):
            if nb < 0 or cat[nb] == CellCategory.OUTSIDE:
                continue
            frac = 1.0 if cat[nb] == CellCategory.INSIDE else float(volume_fractions[int(nb)])
            if best is None or frac > best[0] or (frac == best[0] and face < best[1]):
                best = (frac, face)
        if best is None:
            raise IsolatedCutCellError(f"intersected cell {int(cell)} has no active neighbour")
        chosen.add(best[1])
    return np.array(sorted(chosen), dtype=np.int64)


# partitioning -----------------------------------------------------------------------
@dataclass(frozen=True)
class PartitionWeights:
    inside: int = 1
    intersected: int = 10
    outside: int = 0

    def __post_init__(self):
        if min(self.inside, self.intersected, self.outside) < 0:
            raise ValueError("partition weights must be nonnegative")

    @classmethod
    def matrix_free(cls) -> "PartitionWeights":
        return cls(1, 10, 0)

    @classmethod
    def matrix_based(cls) -> "PartitionWeights":
        return cls(1, 1, 0)

    def of(self, categories: np.ndarray) -> np.ndarray:
        table = np.array([self.inside, self.intersected, self.outside])
        return table[np.asarray(categories, dtype=np.int64)]


def split_weights(weights: Sequence[float], n_workers: int) -> list[tuple[int, int]]:
    """Greedy prefix split of a weight sequence into contiguous ranges.

    Every range weighs at most ``total / n_workers + max(weights)``. All-zero
    weights carry no work to balance and are split evenly by count.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if n == 0:
        return [(0, 0)] * n_workers
    cum = np.cumsum(w)
    total = cum[-1]
    if total <= 0:
        cum, total = np.arange(1.0, n + 1), float(n)
    bounds = [0]
    for j in range(1, n_workers):
        b = int(np.searchsorted(cum, j * total / n_workers, side="left")) + 1
        bounds.append(min(max(b, bounds[-1]), n))
    bounds.append(n)
    return [(bounds[j], bounds[j + 1]) for j in range(n_workers)]


def partition_cells(handler: DofHandler, weights: PartitionWeights, n_workers: int,
                    lanes: int = 1) -> list[tuple[int, int]]:
    """Contiguous ranges over the cells in batch traversal order."""
    order = np.concatenate([b.cells[b.mask] for b in build_cell_batches(handler, lanes)]) \
        if handler.n_active else np.empty(0, dtype=np.int64)
    return split_weights(weights.of(handler.cell_category[order]), n_workers)
