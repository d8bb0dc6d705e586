"""Matrix-free and sparse realizations of the unfitted Poisson operator.

The operator action is assembled from local contributions:

* inside cells: structured sum-factorized Laplacian,
* intersected cells: per-point Laplacian on the cut volume rule plus Nitsche
  boundary terms on the surface rule,
* faces (DG only): symmetric interior penalty fluxes, structured on inside
  faces and per-point on cut faces,
* stabilization faces: volume ghost penalty on the two-cell patch, evaluated
  with extrapolated basis tables.

Work is split into contiguous, weighted ranges of cell batches. Each worker
accumulates into a private destination vector; the vectors are merged in a
fixed order, so the result only depends on the number of workers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import kernels as K
from .geometry import CellCategory, FaceCategory, LevelSet
from .mesh import (DofHandler, PartitionWeights, build_batches,
                   select_stabilization_faces, split_weights)
from .quadrature import (MAX_SUBDIV, CutCellQuadrature, CutFaceQuadrature,
                         SurfaceQuadrature, generate_cut_face_quadrature,
                         generate_cut_volume_quadrature, generate_surface_quadrature)

log = logging.getLogger(__name__)


class MissingQuadratureError(KeyError):
    pass


@dataclass(frozen=True)
class OperatorConfig:
    fe_kind: str = "cg"
    degree: int = 1
    tau_d: float | None = None
    gamma: float | None = None
    tau_v: float = 1.0
    n_q: int | None = None
    lanes: int = 4

    def __post_init__(self):
        fe = self.fe_kind.lower()
        if fe not in ("cg", "dg"):
            raise ValueError(f"fe_kind must be cg or dg, got {self.fe_kind!r}")
        object.__setattr__(self, "fe_kind", fe)
        if not 1 <= self.degree <= K.MAX_DEGREE:
            raise ValueError(f"degree must be in 1..{K.MAX_DEGREE}")
        default = 5.0 * (self.degree + 1) ** 2
        if self.tau_d is None:
            object.__setattr__(self, "tau_d", default)
        if self.gamma is None:
            object.__setattr__(self, "gamma", default)
        if self.n_q is None:
            object.__setattr__(self, "n_q", self.degree + 1)
        if self.tau_d <= 0 or self.gamma <= 0:
            raise ValueError("tau_d and gamma must be positive")
        if self.tau_v < 0:
            raise ValueError("tau_v must be nonnegative")
        K.LaneConfig(self.lanes)

    def to_config(self) -> dict:
        return {"fe": self.fe_kind, "degree": self.degree, "tau_d": self.tau_d,
                "gamma": self.gamma, "tau_v": self.tau_v, "n_q": self.n_q, "lanes": self.lanes}


# -- geometry tables -------------------------------------------------------------------

@dataclass
class GeometryTables:
    """Cut-entity quadrature rules and derived data for one DoF handler."""

    handler: DofHandler
    n_q: int
    cut_cells: np.ndarray
    volume_rules: list
    surface_rules: list
    cut_faces: np.ndarray
    face_rules: list
    volume_fractions: dict
    stabilization_faces: np.ndarray
    n_flagged: int = 0

    def rule_rows(self):
        """Rows for :func:`quadrature.write_rules_csv`."""
        for c, v, s in zip(self.cut_cells, self.volume_rules, self.surface_rules):
            yield int(c), "vol", v
            yield int(c), "surf", s
        for f, r in zip(self.cut_faces, self.face_rules):
            yield int(f), "face", r

    def point_stats(self) -> dict:
        counts = np.array([v.size + s.size for v, s in zip(self.volume_rules, self.surface_rules)])
        if len(counts) == 0:
            return {"max": 0, "mean": 0.0}
        return {"max": int(counts.max()), "mean": float(counts.mean())}


def build_geometry_tables(handler: DofHandler, ls: LevelSet, n_q: int | None = None,
                          max_subdiv: int = MAX_SUBDIV, stabilize: bool = True) -> GeometryTables:
    n_q = handler.degree + 1 if n_q is None else n_q
    mesh = handler.mesh
    cut = handler.cells_of(CellCategory.INTERSECTED)
    lo, hi = mesh.cell_bounds(cut)
    vol, surf, fracs = [], [], {}
    cell_measure = float(np.prod(mesh.h))
    flagged = 0
    for i, c in enumerate(cut):
        v = generate_cut_volume_quadrature(ls, lo[i], hi[i], n_q, max_subdiv)
        s = generate_surface_quadrature(ls, lo[i], hi[i], n_q, max_subdiv)
        flagged += v.flagged + s.flagged
        vol.append(v)
        surf.append(s)
        fracs[int(c)] = float(v.weights.sum()) / cell_measure
    faces = np.empty(0, dtype=np.int64)
    frules = []
    if handler.fe_kind == "dg":
        faces = handler.interior_faces[handler.face_category == FaceCategory.CUT]
        flo, fhi = mesh.face_bounds(faces)
        for i in range(len(faces)):
            r = generate_cut_face_quadrature(ls, flo[i], fhi[i], n_q, max_subdiv)
            flagged += r.flagged
            frules.append(r)
    stab = select_stabilization_faces(handler, fracs) if stabilize else np.empty(0, dtype=np.int64)
    if flagged:
        log.warning("%d cut rules fell back to low-order sampling", flagged)
    return GeometryTables(handler, n_q, cut, vol, surf, faces, frules, fracs, stab, flagged)


# -- local operators ----------------------------------------------------------------------

def _tensor_weights(w: np.ndarray, n: int) -> np.ndarray:
    out = np.ones(1)
    for _ in range(n):
        out = np.multiply.outer(w, out).ravel()
    return out


class LocalTerms:
    """Cell-, face- and patch-local parts of the operator acting on local dof arrays.

    Local dof arrays have shape ``(n, k^d)``.
    """

    def __init__(self, config: OperatorConfig, handler: DofHandler):
        self.cfg = config
        self.dim = d = handler.dim
        self.k = handler.k
        self.shape = K.ShapeInfo.create(handler.degree, config.n_q)
        self.hvec = np.asarray(handler.mesh.h, dtype=float)
        self.h = float(handler.mesh.h_min)
        nq = self.shape.n_q
        w_cell = _tensor_weights(self.shape.qweights, d)
        vol = float(np.prod(self.hvec))
        self.cell_jxw = vol * w_cell
        self.grad_scale = np.stack([self.cell_jxw / hb ** 2 for hb in self.hvec])
        w_face = _tensor_weights(self.shape.qweights, d - 1)
        self.face_jxw = [float(np.prod(np.delete(self.hvec, a))) * w_face for a in range(d)]
        self._cell_shape = (self.k,) * d
        self._qshape = (nq,) * d
        self._fqshape = (nq,) * (d - 1)

    def _cells(self, u, lanes_last=False):
        if lanes_last:
            return u.reshape(*self._cell_shape, u.shape[-1])
        return u.reshape(u.shape[0], *self._cell_shape)

    @staticmethod
    def _lane_weight(w, ndim, lanes_last):
        """Reshape per-lane weights so they broadcast against a local array of ``ndim`` axes."""
        if lanes_last:
            return w.reshape((1,) * (ndim - 1) + (-1,))
        return w.reshape((-1,) + (1,) * (ndim - 1))

    # cells
    def laplace_structured(self, u: np.ndarray, lanes_last: bool = False) -> np.ndarray:
        """Structured-cell Laplacian; ``u`` is ``(n, k^d)`` or ``(k^d, n)`` with ``lanes_last``."""
        d = self.dim
        t = 1 if lanes_last else 0
        _, g = K.eval_structured_cell(self.shape, self._cells(u, lanes_last), d, trailing=t)
        if lanes_last:
            n = u.shape[-1]
            g = g.reshape(d, -1, n) * self.grad_scale[:, :, None]
            out = K.integrate_structured_cell(self.shape, None, g.reshape(d, *self._qshape, n), d, trailing=1)
            return out.reshape(-1, n)
        n = u.shape[0]
        g = g.reshape(n, d, -1) * self.grad_scale
        out = K.integrate_structured_cell(self.shape, None, g.reshape(n, d, *self._qshape), d)
        return out.reshape(n, -1)

    def laplace_points(self, u: np.ndarray, pack: K.QuadDataPacked) -> np.ndarray:
        n = u.shape[0]
        if pack.n_groups == 0:
            return np.zeros_like(u)
        _, g = K.eval_unstructured_points(self.shape, u, pack, gradients=True)
        g = g * (pack.jxw[..., None] / self.hvec ** 2)
        return K.integrate_unstructured_points(self.shape, None, g, pack, n)

    def nitsche(self, u: np.ndarray, pack: K.QuadDataPacked) -> np.ndarray:
        n = u.shape[0]
        if pack.n_groups == 0:
            return np.zeros_like(u)
        v, g = K.eval_unstructured_points(self.shape, u, pack, gradients=True)
        nrm = pack.normals / self.hvec
        dn = np.einsum("gwb,gwb->gw", g, nrm)
        cv = pack.jxw * (-dn + self.cfg.tau_d / self.h * v)
        cg = (-pack.jxw * v)[..., None] * nrm
        return K.integrate_unstructured_points(self.shape, cv, cg, pack, n)

    def cut_cell(self, u, vol_pack, surf_pack) -> np.ndarray:
        return self.laplace_points(u, vol_pack) + self.nitsche(u, surf_pack)

    # faces
    def _sipg_coefficients(self, vm, dnm, vp, dnp, jxw, ha):
        jump = vm - vp
        flux = 0.5 * (dnm + dnp) / ha - self.cfg.gamma / self.h * jump
        cdn = -0.5 * jump * jxw / ha
        return -flux * jxw, cdn, flux * jxw, cdn

    def sipg_structured(self, um, up, axis, lane_weight=None, lanes_last: bool = False):
        d = self.dim
        t = 1 if lanes_last else 0
        F = K.eval_face_pair_value_normal(self.shape, self._cells(um, lanes_last),
                                          self._cells(up, lanes_last), d, axis, trailing=t)
        jxw = self.face_jxw[axis]
        if lanes_last:
            n = um.shape[-1]
            F = F.reshape(4, -1, n)
            jxw = jxw[:, None]
        else:
            n = um.shape[0]
            F = F.reshape(4, n, -1)
        if lane_weight is not None:
            jxw = jxw * self._lane_weight(lane_weight, 2, lanes_last)
        C = np.stack(self._sipg_coefficients(F[0], F[1], F[2], F[3], jxw, self.hvec[axis]))
        C = C.reshape(4, *self._fqshape, n) if lanes_last else C.reshape(4, n, *self._fqshape)
        om, op = K.integrate_face_pair_value_normal(self.shape, C, d, axis, trailing=t)
        shp = (-1, n) if lanes_last else (n, -1)
        return om.reshape(shp), op.reshape(shp)

    def sipg_points(self, um, up, axis, pack):
        d = self.dim
        fm, fp = 2 * axis + 1, 2 * axis
        n = um.shape[0]
        if pack.n_groups == 0:
            return np.zeros_like(um), np.zeros_like(up)
        vm, dnm = K.eval_face_points_value_normal(self.shape, um, d, fm, pack)
        vp, dnp = K.eval_face_points_value_normal(self.shape, up, d, fp, pack)
        cvm, cdm, cvp, cdp = self._sipg_coefficients(vm, dnm, vp, dnp, pack.jxw, self.hvec[axis])
        om = K.integrate_face_points_value_normal(self.shape, cvm, cdm, d, fm, pack, n)
        op = K.integrate_face_points_value_normal(self.shape, cvp, cdp, d, fp, pack, n)
        return om, op

    def ghost_penalty(self, um, up, axis, lane_weight=None, lanes_last: bool = False):
        """Volume ghost penalty on the patch of the minus and plus cell across ``axis``."""
        d = self.dim
        sh = self.shape
        t = 1 if lanes_last else 0
        cm, cp = self._cells(um, lanes_last), self._cells(up, lanes_last)
        std = [sh.values] * d
        u1 = K.eval_structured_values(std, cm, d, t)
        eu2 = K.eval_extrapolated(sh, cp, d, axis, -1, t)
        eu1 = K.eval_extrapolated(sh, cm, d, axis, +1, t)
        u2 = K.eval_structured_values(std, cp, d, t)
        scale = self.cfg.tau_v / self.h ** 2 * self.cell_jxw.reshape(self._qshape)
        if lanes_last:
            scale = scale[..., None]
        if lane_weight is not None:
            scale = scale * self._lane_weight(lane_weight, d + 1, lanes_last)
        c1 = scale * (u1 - eu2)
        c2 = scale * (eu1 - u2)
        om = K.integrate_structured_values(std, c1, d, t) + K.integrate_extrapolated(sh, c2, d, axis, +1, t)
        op = -K.integrate_extrapolated(sh, c1, d, axis, -1, t) - K.integrate_structured_values(std, c2, d, t)
        shp = (-1, um.shape[-1]) if lanes_last else (um.shape[0], -1)
        return om.reshape(shp), op.reshape(shp)


# -- work plans ------------------------------------------------------------------------------

@dataclass
class _FacePlan:
    """Faces of one direction; index arrays hold active cells (padding -> dummy row)."""

    axis: int
    minus_flux: np.ndarray
    plus_flux: np.ndarray
    flux_weight: np.ndarray    # lane mask, zero on lanes without structured flux
    minus_ghost: np.ndarray
    plus_ghost: np.ndarray
    ghost_weight: np.ndarray
    cut_minus: np.ndarray
    cut_plus: np.ndarray
    cut_pack: K.QuadDataPacked | None


@dataclass
class _WorkerPlan:
    inside: np.ndarray                 # active indices incl. padding
    cut: np.ndarray                    # active indices of intersected cells
    vol_pack: K.QuadDataPacked | None
    surf_pack: K.QuadDataPacked | None
    faces: list = field(default_factory=list)
    weight: float = 0.0


def _select_rules(rules, idx):
    return [rules[i] for i in idx]


class CutPoissonOperator:
    """Matrix-free operator ``src -> A src`` on the active degrees of freedom."""

    def __init__(self, config: OperatorConfig, handler: DofHandler, tables: GeometryTables,
                 n_workers: int = 1, threaded: bool = True,
                 weights: PartitionWeights | None = None, chunk: int = 512):
        if tables.handler is not handler:
            raise ValueError("geometry tables were built for a different handler")
        if config.fe_kind != handler.fe_kind or config.degree != handler.degree:
            raise ValueError("operator config does not match the DoF handler")
        self.config = config
        self.handler = handler
        self.tables = tables
        self.terms = LocalTerms(config, handler)
        self.dim = handler.dim
        self.kd = handler.k ** handler.dim
        self.n_dofs = handler.n_dofs
        self.n_workers = max(1, int(n_workers))
        self.threaded = threaded
        self.chunk = chunk
        self.weights = weights or PartitionWeights.matrix_free()
        self._dummy = handler.n_active
        self._dofs_ext = np.vstack([handler.cell_dofs,
                                    np.full((1, self.kd), handler.n_dofs, dtype=np.int64)])
        self._dofs_ext_t = np.ascontiguousarray(self._dofs_ext.T)
        self._check_tables()
        self.cell_batches, self.face_batches = build_batches(handler, config.lanes,
                                                             tables.stabilization_faces)
        self.plans = self._make_plans()

    # setup -------------------------------------------------------------------------------
    def _check_tables(self):
        h, t = self.handler, self.tables
        cut = h.cells_of(CellCategory.INTERSECTED)
        if not np.array_equal(np.sort(cut), np.sort(t.cut_cells)):
            raise MissingQuadratureError("cut-cell rules missing for some intersected cells")
        if h.fe_kind == "dg":
            need = h.interior_faces[h.face_category == FaceCategory.CUT]
            if not np.all(np.isin(need, t.cut_faces)):
                raise MissingQuadratureError("cut-face rules missing for some cut faces")
        self._cut_pos = {int(c): i for i, c in enumerate(t.cut_cells)}
        self._face_pos = {int(f): i for i, f in enumerate(t.cut_faces)}

    def _make_plans(self) -> list[_WorkerPlan]:
        h = self.handler
        W = self.config.lanes
        cat = h.cell_category
        bw = np.array([self.weights.of(cat[b.cells[b.mask]]).sum() for b in self.cell_batches])
        ranges = split_weights(bw, self.n_workers)
        owner = np.full(h.mesh.n_cells, 0, dtype=np.int64)
        plans = []
        for wi, (s, e) in enumerate(ranges):
            inside, cut = [], []
            for b in self.cell_batches[s:e]:
                owner[b.cells[b.mask]] = wi
                act = np.where(b.mask, h.cell_to_active[np.maximum(b.cells, 0)], self._dummy)
                (inside if b.category == CellCategory.INSIDE else cut).append(
                    act if b.category == CellCategory.INSIDE else act[b.mask])
            inside = np.concatenate(inside) if inside else np.empty(0, dtype=np.int64)
            cut = np.concatenate(cut) if cut else np.empty(0, dtype=np.int64)
            cut_cells = h.active_cells[cut]
            pos = [self._cut_pos[int(c)] for c in cut_cells]
            vp = sp_ = None
            if len(pos):
                vp = K.pack_rules(cut_cells, _select_rules(self.tables.volume_rules, pos), W, self.dim)
                sp_ = K.pack_rules(cut_cells, _select_rules(self.tables.surface_rules, pos), W,
                                   self.dim, with_normals=True)
            plans.append(_WorkerPlan(inside, cut, vp, sp_, [], float(bw[s:e].sum())))
        # faces go to the worker owning the minus cell of the batch's first face
        per = [[[] for _ in range(self.dim)] for _ in plans]
        minus_all, _ = h.mesh.face_cells(np.arange(h.mesh.n_faces))
        for b in self.face_batches:
            wi = int(owner[minus_all[b.faces[0]]])
            per[wi][b.direction].append(b)
        for wi, plan in enumerate(plans):
            for a in range(self.dim):
                if per[wi][a]:
                    plan.faces.append(self._face_plan(a, per[wi][a]))
        return plans

    def _face_plan(self, axis, batches) -> _FacePlan:
        h = self.handler
        mesh = h.mesh
        faces = np.concatenate([b.faces for b in batches])
        mask = np.concatenate([b.mask for b in batches])
        ghost = np.concatenate([b.ghost for b in batches])
        flux = np.concatenate([b.inside_flux for b in batches])
        cutf = np.concatenate([b.cut_flux for b in batches])
        m, p = mesh.face_cells(np.maximum(faces, 0))
        am = np.where(mask, h.cell_to_active[m], self._dummy)
        ap = np.where(mask, h.cell_to_active[p], self._dummy)
        # structured parts run over whole batches that have any lane with work
        nb = len(batches)
        W = self.config.lanes
        flux_b = flux.reshape(nb, W).any(axis=1).repeat(W)
        ghost_b = ghost.reshape(nb, W).any(axis=1).repeat(W)
        empty = np.empty(0, dtype=np.int64)
        plan = _FacePlan(axis, am[flux_b], ap[flux_b], flux[flux_b].astype(float),
                         am[ghost_b], ap[ghost_b], ghost[ghost_b].astype(float),
                         empty, empty, None)
        if cutf.any():
            fids = faces[cutf]
            pos = [self._face_pos[int(f)] for f in fids]
            plan.cut_minus = am[cutf]
            plan.cut_plus = ap[cutf]
            plan.cut_pack = K.pack_rules(fids, _select_rules(self.tables.face_rules, pos), W, self.dim - 1)
        return plan

    # application ---------------------------------------------------------------------------
    # DG gathers from a (k^d, n_active + 1) transposed copy of the source so that
    # cells land on the last axis, and accumulates into a row-major destination.
    # CG gathers through the transposed dof map and sums all contributions with
    # one bincount per worker.
    def _gather(self, vec, act):
        if self.handler.fe_kind == "dg":
            return vec[:, act]
        return vec[self._dofs_ext_t[:, act]]

    def _scatter(self, dst, act, contrib, lanes_last=True):
        if self.handler.fe_kind == "dg":
            # each active index appears once per call apart from the dummy row
            dst[act] += contrib.T if lanes_last else contrib
        else:
            idx = self._dofs_ext_t[:, act] if lanes_last else self._dofs_ext[act]
            dst.append((idx.ravel(), contrib.ravel()))

    def _run(self, plan: _WorkerPlan, vec: np.ndarray) -> np.ndarray:
        dg = self.handler.fe_kind == "dg"
        dst = np.zeros((vec.shape[1], self.kd)) if dg else []
        T = self.terms
        c = self.chunk
        for s in range(0, len(plan.inside), c):
            act = plan.inside[s:s + c]
            self._scatter(dst, act, T.laplace_structured(self._gather(vec, act), lanes_last=True))
        if len(plan.cut):
            u = self._gather(vec, plan.cut).T
            self._scatter(dst, plan.cut, T.cut_cell(u, plan.vol_pack, plan.surf_pack), False)
        for fp in plan.faces:
            a = fp.axis
            for s in range(0, len(fp.minus_flux), c):
                am, ap = fp.minus_flux[s:s + c], fp.plus_flux[s:s + c]
                om, op = T.sipg_structured(self._gather(vec, am), self._gather(vec, ap), a,
                                           fp.flux_weight[s:s + c], lanes_last=True)
                self._scatter(dst, am, om)
                self._scatter(dst, ap, op)
            if len(fp.cut_minus):
                om, op = T.sipg_points(self._gather(vec, fp.cut_minus).T,
                                       self._gather(vec, fp.cut_plus).T, a, fp.cut_pack)
                self._scatter(dst, fp.cut_minus, om, False)
                self._scatter(dst, fp.cut_plus, op, False)
            for s in range(0, len(fp.minus_ghost), c):
                am, ap = fp.minus_ghost[s:s + c], fp.plus_ghost[s:s + c]
                om, op = T.ghost_penalty(self._gather(vec, am), self._gather(vec, ap), a,
                                         fp.ghost_weight[s:s + c], lanes_last=True)
                self._scatter(dst, am, om)
                self._scatter(dst, ap, op)
        if dg:
            return dst.reshape(-1)
        if not dst:
            return np.zeros(len(vec))
        return np.bincount(np.concatenate([i for i, _ in dst]), np.concatenate([v for _, v in dst]),
                           minlength=len(vec))

    def _extend(self, src):
        src = np.asarray(src, dtype=float)
        if src.shape != (self.n_dofs,):
            raise ValueError(f"source vector has shape {src.shape}, expected ({self.n_dofs},)")
        extra = self.kd if self.handler.fe_kind == "dg" else 1
        return np.concatenate([src, np.zeros(extra)])

    def apply(self, src: np.ndarray) -> np.ndarray:
        src_ext = self._extend(src)
        dg = self.handler.fe_kind == "dg"
        vec = np.ascontiguousarray(src_ext.reshape(-1, self.kd).T) if dg else src_ext
        if self.n_workers == 1 or not self.threaded:
            parts = [self._run(p, vec) for p in self.plans]
        else:
            with ThreadPoolExecutor(self.n_workers) as ex:
                parts = list(ex.map(lambda p: self._run(p, vec), self.plans))
        dst = parts[0]
        for p in parts[1:]:
            dst = dst + p
        return dst[: self.n_dofs]

    __call__ = apply

    def diagonal(self) -> np.ndarray:
        return assemble_sparse(self).diagonal()


# -- right-hand side and point data ---------------------------------------------------------

def _structured_points(handler: DofHandler, shape: K.ShapeInfo, cells: np.ndarray) -> np.ndarray:
    d = handler.dim
    grids = np.meshgrid(*([shape.qpoints] * d), indexing="ij")  # z, y, x for d=3
    ref = np.stack([grids[d - 1 - a].ravel() for a in range(d)], axis=-1)
    lo, _ = handler.mesh.cell_bounds(cells)
    return lo[:, None, :] + ref[None, :, :] * handler.mesh.h


def physical_points(handler: DofHandler, pack: K.QuadDataPacked) -> np.ndarray:
    lo, _ = handler.mesh.cell_bounds(pack.entities[pack.owner])
    return lo[:, None, :] + pack.points * handler.mesh.h


def assemble_rhs(config: OperatorConfig, handler: DofHandler, tables: GeometryTables,
                 f: Callable, g: Callable | None = None) -> np.ndarray:
    """Load vector for ``-lap u = f`` with Dirichlet data ``g`` imposed by Nitsche terms."""
    terms = LocalTerms(config, handler)
    sh, d = terms.shape, handler.dim
    W = config.lanes
    rhs = np.zeros(handler.n_dofs)

    def scatter(cells, contrib):
        dofs = handler.local_dofs(cells)
        rhs[:] += np.bincount(dofs.ravel(), contrib.ravel(), minlength=handler.n_dofs)

    inside = handler.cells_of(CellCategory.INSIDE)
    if len(inside):
        x = _structured_points(handler, sh, inside)
        c = terms.cell_jxw * f(x)
        out = K.integrate_structured_values([sh.values] * d, c.reshape(len(inside), *terms._qshape), d)
        scatter(inside, out.reshape(len(inside), -1))
    cut = tables.cut_cells
    if len(cut):
        vp = K.pack_rules(cut, tables.volume_rules, W, d)
        if vp.n_groups:
            cv = vp.jxw * f(physical_points(handler, vp))
            scatter(cut, K.integrate_unstructured_points(sh, cv, None, vp, len(cut)))
        if g is not None:
            spk = K.pack_rules(cut, tables.surface_rules, W, d, with_normals=True)
            if spk.n_groups:
                gv = g(physical_points(handler, spk))
                cv = spk.jxw * config.tau_d / terms.h * gv
                cg = (-spk.jxw * gv)[..., None] * spk.normals / terms.hvec
                scatter(cut, K.integrate_unstructured_points(sh, cv, cg, spk, len(cut)))
    return rhs


def evaluate_at_points(handler: DofHandler, tables: GeometryTables, x: np.ndarray, config=None):
    """Solution values and physical JxW at all quadrature points of Omega.

    Returns ``(points (N, d), values (N,), jxw (N,))``.
    """
    shape = K.ShapeInfo.create(handler.degree, tables.n_q)
    d = handler.dim
    pts, vals, wts = [], [], []
    inside = handler.cells_of(CellCategory.INSIDE)
    if len(inside):
        u = x[handler.local_dofs(inside)].reshape(len(inside), *(handler.k,) * d)
        v = K.eval_structured_values([shape.values] * d, u, d).reshape(len(inside), -1)
        jxw = float(np.prod(handler.mesh.h)) * _tensor_weights(shape.qweights, d)
        pts.append(_structured_points(handler, shape, inside).reshape(-1, d))
        vals.append(v.ravel())
        wts.append(np.broadcast_to(jxw, v.shape).ravel())
    if len(tables.cut_cells):
        vp = K.pack_rules(tables.cut_cells, tables.volume_rules, 4, d)
        if vp.n_groups:
            u = x[handler.local_dofs(tables.cut_cells)]
            v, _ = K.eval_unstructured_points(shape, u, vp, gradients=False)
            pts.append(physical_points(handler, vp).reshape(-1, d))
            vals.append(v.ravel())
            wts.append(vp.jxw.ravel())
    if not pts:
        return np.empty((0, d)), np.empty(0), np.empty(0)
    return np.concatenate(pts), np.concatenate(vals), np.concatenate(wts)


# -- sparse path --------------------------------------------------------------------------------

@dataclass
class SparseMatrixCSR:
    """CSR matrix with 32-bit column indices."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int32)
        self.data = np.asarray(self.data, dtype=np.float64)
        self._scipy = sp.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrixCSR":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def to_scipy(self):
        return self._scipy

    def diagonal(self) -> np.ndarray:
        return self._scipy.diagonal()

    def to_dense(self) -> np.ndarray:
        return self._scipy.toarray()

    def memory_bytes(self) -> int:
        return self.data.nbytes + self.indices.nbytes + self.indptr.nbytes

    def write_matrix_market(self, path) -> None:
        from scipy.io import mmwrite
        mmwrite(str(path), self._scipy)


def spmv(A: SparseMatrixCSR, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[1],):
        raise ValueError(f"dimension mismatch: matrix {A.shape}, vector {x.shape}")
    return A._scipy @ x


def _local_columns(fn, n_entities, kd, n_inputs=1):
    """Apply ``fn`` to unit vectors; returns matrices ``(n_outputs, n_entities, kd_out, n_inputs*kd)``."""
    cols = []
    for j in range(n_inputs * kd):
        us = []
        for i in range(n_inputs):
            u = np.zeros((n_entities, kd))
            if j // kd == i:
                u[:, j % kd] = 1.0
            us.append(u)
        out = fn(*us)
        out = out if isinstance(out, tuple) else (out,)
        cols.append(np.stack(out))
    return np.stack(cols, axis=-1)


def _blocks_to_coo(rows_dofs, cols_dofs, blocks):
    """``blocks (n, r, c)``; returns COO triplets."""
    r = np.broadcast_to(rows_dofs[:, :, None], blocks.shape).ravel()
    c = np.broadcast_to(cols_dofs[:, None, :], blocks.shape).ravel()
    return r, c, blocks.ravel()


def _local_blocks(op: CutPoissonOperator):
    """Yield ``(row_dofs, col_dofs, blocks)`` for every local operator term.

    Cell terms have ``col_dofs = row_dofs``; face terms couple both neighbors and
    carry ``2 kd`` columns ordered (minus | plus).
    """
    h = op.handler
    T = op.terms
    kd = op.kd
    inside = h.cells_of(CellCategory.INSIDE)
    if len(inside):
        loc = _local_columns(T.laplace_structured, 1, kd)[0, 0]
        dofs = h.local_dofs(inside)
        for s in range(0, len(inside), 50_000):
            dd = dofs[s:s + 50_000]
            yield dd, dd, np.broadcast_to(loc, (len(dd), kd, kd))
    for plan in op.plans:
        if len(plan.cut):
            m = _local_columns(lambda u: T.cut_cell(u, plan.vol_pack, plan.surf_pack), len(plan.cut), kd)[0]
            dofs = h.cell_dofs[plan.cut]
            yield dofs, dofs, m
        for fp in plan.faces:
            a = fp.axis
            if len(fp.minus_flux):
                sel = fp.flux_weight > 0
                loc = _local_columns(lambda um, up: T.sipg_structured(um, up, a), 1, kd, 2)[:, 0]
                yield from _face_blocks(h, fp.minus_flux[sel], fp.plus_flux[sel], loc, kd)
            if len(fp.cut_minus):
                loc = _local_columns(lambda um, up: T.sipg_points(um, up, a, fp.cut_pack),
                                     len(fp.cut_minus), kd, 2)
                yield from _face_blocks(h, fp.cut_minus, fp.cut_plus, loc, kd)
            if len(fp.minus_ghost):
                sel = fp.ghost_weight > 0
                loc = _local_columns(lambda um, up: T.ghost_penalty(um, up, a), 1, kd, 2)[:, 0]
                yield from _face_blocks(h, fp.minus_ghost[sel], fp.plus_ghost[sel], loc, kd)


def assemble_sparse(op: CutPoissonOperator, drop_zeros: bool = False) -> SparseMatrixCSR:
    """Sparse matrix obtained by applying the local operators to unit vectors."""
    n = op.handler.n_dofs
    total = sp.csr_matrix((n, n))
    parts = []

    def flush():
        nonlocal total, parts
        if parts:
            r = np.concatenate([p[0] for p in parts])
            c = np.concatenate([p[1] for p in parts])
            v = np.concatenate([p[2] for p in parts])
            total = total + sp.csr_matrix((v, (r, c)), shape=(n, n))
            parts = []

    for rd, cd, blocks in _local_blocks(op):
        parts.append(_blocks_to_coo(rd, cd, blocks))
        if sum(len(p[2]) for p in parts) > 20_000_000:
            flush()
    flush()
    if drop_zeros:
        total.eliminate_zeros()
    return SparseMatrixCSR.from_scipy(total)


def assemble_cell_blocks(op: CutPoissonOperator, matrix: SparseMatrixCSR | None = None) -> np.ndarray:
    """Principal submatrices ``A[dofs_c, dofs_c]`` of every active cell, shape (n_active, kd, kd).

    DG blocks are accumulated from the local terms without forming the global
    matrix. CG cells share DoFs, so their blocks are read from the assembled
    matrix (built here unless ``matrix`` is given).
    """
    h = op.handler
    kd = op.kd
    if h.fe_kind == "cg":
        A = (matrix if matrix is not None else assemble_sparse(op)).to_scipy()
        out = np.empty((len(h.active_cells), kd, kd))
        for s in range(0, len(out), 20_000):
            d = h.cell_dofs[s:s + 20_000]
            rows = np.repeat(d, kd, axis=1).ravel()
            cols = np.tile(d, (1, kd)).ravel()
            out[s:s + len(d)] = np.asarray(A[rows, cols]).reshape(len(d), kd, kd)
        return out
    out = np.zeros((len(h.active_cells), kd, kd))
    for rd, cd, blocks in _local_blocks(op):
        act = rd[:, 0] // kd
        if cd.shape[1] == kd:
            np.add.at(out, act, blocks)
        else:
            # face terms: the row cell is either the minus or the plus half of the columns
            half = slice(0, kd) if np.array_equal(cd[:, :kd], rd) else slice(kd, 2 * kd)
            np.add.at(out, act, blocks[:, :, half])
    return out


def _face_blocks(h, am, ap, loc, kd):
    """``loc`` has shape (2, [n,] kd, 2 kd): outputs (minus, plus) by inputs (minus | plus)."""
    if len(am) == 0:
        return
    dm, dp = h.cell_dofs[am], h.cell_dofs[ap]
    both = np.concatenate([dm, dp], axis=1)
    for out_idx, rows in ((0, dm), (1, dp)):
        blk = loc[out_idx]
        if blk.ndim == 2:
            blk = np.broadcast_to(blk, (len(am), kd, 2 * kd))
        yield rows, both, blk
