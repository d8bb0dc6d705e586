"""Experiment drivers and verification suites used by the command line.

Each driver takes a resolved :class:`RunConfig` and returns plain rows or a
summary dict; writing files is left to :mod:`cutfem_mf.cli`.
"""
from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K
from .geometry import (CellCategory, Complement, LevelSet, ManufacturedSolution, Plane, Sphere,
                       level_set_from_config)
from .mesh import CartesianMesh, build_dof_handler, build_mesh
from .operators import (CutPoissonOperator, LocalTerms, OperatorConfig, assemble_cell_blocks,
                        assemble_rhs, assemble_sparse, build_geometry_tables, spmv)
from .perf import CostModel, measure_throughput
from .quadrature import (MAX_SUBDIV, CutCellQuadrature, generate_cut_volume_quadrature,
                         generate_surface_quadrature)
from .solver import (CellBlockPreconditioner, ConvergenceError, IndefiniteOperatorError,
                     SolverConfig, cg_solve, compute_l2_error, estimate_eoc)

log = logging.getLogger(__name__)

COMMANDS = ("convergence", "throughput-plane", "spheres", "verify", "cost-model")
FAULTS = ("penalty_sign",)

BOX_ORIGIN = -1.035
BOX_EXTENT = 2.07


class ConfigError(ValueError):
    """Invalid run configuration (exit code 2)."""


def available_parallelism() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - not on Linux
        return os.cpu_count() or 1


_UNIT_SPHERE = {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 1.0}
_SPHERE_BOX = {"n": 12, "origin": BOX_ORIGIN, "extent": BOX_EXTENT}

COMMAND_DEFAULTS = {
    "convergence": {"geometry": _UNIT_SPHERE, "mesh": _SPHERE_BOX, "fe": "cg", "degree": 1,
                    "refinements": 3},
    "throughput-plane": {"fe": "dg", "degree": 1},
    "spheres": {"geometry": {"type": "sphere_grid", "n": 10},
                "mesh": {"n": 48, "origin": -1.05, "extent": 2.1}, "fe": "dg", "degree": 1,
                "max_subdiv": 0},
    "verify": {"geometry": _UNIT_SPHERE, "mesh": {**_SPHERE_BOX, "n": 6}},
    "cost-model": {},
}


@dataclass
class RunConfig:
    command: str = "verify"
    geometry: dict | None = None
    mesh: dict | None = None
    fe: str | None = None
    degree: int | None = None
    refinements: int | None = None
    lanes: int = 4
    threads: int | None = None
    tau_v: float = 1.0
    tau_d: float | None = None
    gamma: float | None = None
    seed: int = 0
    out: str | None = None
    # solver
    tolerance: float = 1e-10
    max_iterations: int = 20_000
    preconditioner: str = "cell_block"
    memory_budget_gb: float = 1.5
    omega: float = math.pi
    # throughput
    ratios: list = field(default_factory=lambda: [1.0, 0.5, 0.1, 0.01, 0.0])
    plane_cells: int = 3600
    min_seconds: float = 1.0
    rounds: int = 3
    kernel_cells: int = 2048
    # quadrature
    max_subdiv: int = MAX_SUBDIV
    # cost model and roofline
    machine: dict | None = None
    degrees: list | None = None
    # verify
    fault: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if self.fe is not None:
            self.fe = str(self.fe).lower()
            if self.fe not in ("cg", "dg"):
                raise ConfigError(f"fe must be cg or dg, got {self.fe!r}")
        if self.degree is not None and not 1 <= int(self.degree) <= K.MAX_DEGREE:
            raise ConfigError(f"degree must be in 1..{K.MAX_DEGREE}")
        if self.refinements is not None and int(self.refinements) < 1:
            raise ConfigError("refinements must be >= 1 (number of meshes in the ladder)")
        if self.lanes not in (1, 2, 4, 8, 16):
            raise ConfigError("lanes must be one of 1, 2, 4, 8, 16")
        if self.threads is not None and int(self.threads) < 1:
            raise ConfigError("threads must be >= 1")
        if self.tau_v < 0:
            raise ConfigError("tau_v must be nonnegative")
        for name in ("tau_d", "gamma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.tolerance < 1:
            raise ConfigError("tolerance must lie in (0, 1)")
        if self.preconditioner not in ("none", "jacobi", "cell_block"):
            raise ConfigError("preconditioner must be none, jacobi or cell_block")
        if any(not 0 <= float(r) <= 1 for r in self.ratios):
            raise ConfigError("cut ratios must lie in [0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.min_seconds <= 0 or self.plane_cells < 1 or self.kernel_cells < 1:
            raise ConfigError("min_seconds, plane_cells and kernel_cells must be positive")
        if self.max_subdiv < 0:
            raise ConfigError("max_subdiv must be >= 0")
        if self.fault is not None and self.fault not in FAULTS:
            raise ConfigError(f"unknown fault {self.fault!r}; expected one of {FAULTS}")
        if self.mesh is not None:
            n = self.mesh.get("n", 1)
            if int(np.min(n)) < 1 or float(np.min(self.mesh.get("extent", 1.0))) <= 0:
                raise ConfigError("mesh needs n >= 1 and a positive extent")
        if self.geometry is not None:
            try:
                level_set_from_config(self.geometry)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid geometry: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def operator_config(self, fe: str | None = None, degree: int | None = None) -> OperatorConfig:
        return OperatorConfig(fe or self.fe, degree or self.degree, self.tau_d, self.gamma,
                              self.tau_v, None, self.lanes)


def resolve_config(raw: dict) -> RunConfig:
    """Fill command defaults and the worker count; raises :class:`ConfigError`."""
    raw = dict(raw)
    command = raw.get("command") or "verify"
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {COMMANDS}")
    known = set(RunConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged = {**COMMAND_DEFAULTS[command], **{k: v for k, v in raw.items() if v is not None}}
    merged["command"] = command
    if isinstance(merged.get("mesh"), dict):
        merged["mesh"] = {**COMMAND_DEFAULTS[command].get("mesh", {}), **merged["mesh"]}
    if merged.get("threads") is None:
        merged["threads"] = available_parallelism()
    geo = merged.get("geometry")
    if isinstance(geo, dict) and geo.get("type") == "sphere_random" and "seed" not in geo:
        merged["geometry"] = {**geo, "seed": int(merged.get("seed", 0))}
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _mesh(cfg: RunConfig, refinement: int = 0) -> CartesianMesh:
    m = cfg.mesh
    return build_mesh(m.get("origin", BOX_ORIGIN), m.get("extent", BOX_EXTENT), m["n"], refinement, 3)


# -- convergence ------------------------------------------------------------------------

def _sparse_bytes_estimate(handler) -> float:
    kd = handler.k ** handler.dim
    if handler.fe_kind == "cg":
        nnz = handler.n_dofs * (2 * handler.degree + 1) ** handler.dim
    else:
        nnz = handler.n_active * kd * kd * (2 * handler.dim + 1)
    # COO staging during assembly roughly doubles the footprint of the final CSR
    return 2.0 * 12.0 * nnz


def solve_sphere_problem(cfg: RunConfig, refinement: int, fe: str | None = None,
                         degree: int | None = None) -> dict:
    """One rung of the sphere ladder: build, solve, measure the L2 error."""
    fe = fe or cfg.fe
    degree = degree or cfg.degree
    geo = cfg.geometry
    if geo.get("type") != "sphere":
        raise ConfigError("the convergence study needs a sphere geometry")
    ls = level_set_from_config(geo)
    center = ls.center
    exact = ManufacturedSolution(cfg.omega, ls.radius, 3)
    u = lambda x: exact.u(np.asarray(x) - center)  # noqa: E731
    f = lambda x: exact.f(np.asarray(x) - center)  # noqa: E731
    t0 = time.perf_counter()
    mesh = _mesh(cfg, refinement)
    h = build_dof_handler(mesh, ls, fe, degree)
    tables = build_geometry_tables(h, ls, max_subdiv=cfg.max_subdiv)
    opcfg = cfg.operator_config(fe, degree)
    op = CutPoissonOperator(opcfg, h, tables, n_workers=cfg.threads)
    use_sparse = _sparse_bytes_estimate(h) <= cfg.memory_budget_gb * 1e9
    A = assemble_sparse(op) if use_sparse else None
    if A is not None:
        S = A.to_scipy()
        apply = lambda v: S @ v  # noqa: E731
    else:
        apply = op.apply
    block = diag = None
    if cfg.preconditioner == "cell_block":
        block = CellBlockPreconditioner(assemble_cell_blocks(op, A), h.cell_dofs, h.n_dofs)
    elif cfg.preconditioner == "jacobi":
        diag = A.diagonal() if A is not None else op.diagonal()
    b = assemble_rhs(opcfg, h, tables, f, None)
    row = {"fe": fe, "p": degree, "refinement": refinement,
           "h_over_L": float(mesh.h_min / mesh.extent.max()), "dofs": h.n_dofs,
           "l2_rel_error": None, "eoc": None, "iterations": None,
           "apply": "sparse" if A is not None else "matrix_free", "error": ""}
    try:
        res = cg_solve(apply, b, SolverConfig(cfg.tolerance, cfg.max_iterations, cfg.preconditioner),
                       diag, preconditioner=block)
    except (ConvergenceError, IndefiniteOperatorError) as exc:
        row["error"] = type(exc).__name__
        row["wall_seconds"] = time.perf_counter() - t0
        return row
    rep = compute_l2_error(h, tables, res.x, u, res.iterations)
    row.update(l2_rel_error=rep.l2_rel_error, iterations=res.iterations,
               wall_seconds=time.perf_counter() - t0)
    return row


def run_convergence(cfg: RunConfig, progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Rows over the ladder ``n, 2n, ...`` with ``cfg.refinements`` meshes."""
    rows = []
    prev = None
    for r in range(cfg.refinements):
        row = solve_sphere_problem(cfg, r)
        e = row["l2_rel_error"]
        if prev is not None and e is not None and prev > 0 and e > 0:
            row["eoc"] = estimate_eoc(prev, e)
        prev = e
        rows.append(row)
        if progress:
            progress(row)
    return rows


CONVERGENCE_COLUMNS = ["fe", "p", "refinement", "h_over_L", "dofs", "l2_rel_error", "eoc",
                       "iterations", "apply", "error", "wall_seconds"]


# -- plane benchmark ------------------------------------------------------------------------

def plane_setup(ratio: float, n_cells: int, smallest_ratio: float = 0.01):
    """Slab mesh and plane giving an exact cut ratio of ``1 / L`` with ``L`` active layers.

    The plane is normal to x and cuts the last active layer in half. The cross
    section is sized so that roughly ``n_cells`` cells are active for every
    ratio. ``ratio = 0`` reuses the slab of ``smallest_ratio`` with the plane
    moved beyond the box.
    """
    if ratio < 0 or ratio > 1:
        raise ValueError("ratio must lie in [0, 1]")
    layers = max(1, round(1.0 / (ratio if ratio > 0 else smallest_ratio)))
    side = max(1, round(math.sqrt(n_cells / layers)))
    h = 1.0 / 16
    cells = (layers + 1, side, side) if ratio > 0 else (layers, side, side)
    mesh = CartesianMesh(np.zeros(3), h * np.asarray(cells, dtype=float), cells)
    offset = (layers - 0.5) * h if ratio > 0 else (layers + 1.0) * h
    return mesh, Plane(np.array([1.0, 0.0, 0.0]), offset)


def _blend_model(fe: str, p: int, cut_ratio: float, lanes: int) -> tuple[float, float]:
    s = CostModel("mf_structured", fe, p, lanes=lanes)
    u = CostModel("mf_unstructured", fe, p, lanes=lanes)
    b = (1 - cut_ratio) * s.bytes_per_dof + cut_ratio * u.bytes_per_dof
    fl = (1 - cut_ratio) * s.flops_per_dof + cut_ratio * u.flops_per_dof
    return b, fl


def run_throughput_plane(cfg: RunConfig) -> list[dict]:
    """Matrix-free and SpMV throughput over the requested cut ratios.

    All cases are built first and then timed in ``cfg.rounds`` interleaved
    passes; each case reports its median-speed round, so a slow stretch of the
    machine cannot single out one ratio.
    """
    rng = np.random.default_rng(cfg.seed)
    positive = [r for r in cfg.ratios if r > 0]
    smallest = min(positive) if positive else 0.01
    cases = []
    for ratio in cfg.ratios:
        mesh, plane = plane_setup(float(ratio), cfg.plane_cells, smallest)
        h = build_dof_handler(mesh, plane, cfg.fe, cfg.degree)
        tables = build_geometry_tables(h, plane, max_subdiv=cfg.max_subdiv)
        op = CutPoissonOperator(cfg.operator_config(), h, tables, n_workers=cfg.threads)
        cases.append((float(ratio), h, op, assemble_sparse(op), rng.standard_normal(h.n_dofs)))
    timings = [([], []) for _ in cases]
    for _ in range(cfg.rounds):
        for (ratio, h, op, A, x), (mfs, sps) in zip(cases, timings):
            mfs.append(measure_throughput(lambda: op.apply(x), h.n_dofs, cfg.min_seconds, h.cut_ratio))
            sps.append(measure_throughput(lambda: spmv(A, x), h.n_dofs, cfg.min_seconds, h.cut_ratio))
    rows = []
    for (ratio, h, op, A, x), (mfs, sps) in zip(cases, timings):
        mf, sp_ = _median_record(mfs), _median_record(sps)
        cut_ratio = h.cut_ratio
        mb, mfl = _blend_model(cfg.fe, cfg.degree, cut_ratio, cfg.lanes)
        sm = CostModel("sparse", cfg.fe, cfg.degree)
        common = {"p": cfg.degree, "fe": cfg.fe, "requested_ratio": ratio,
                  "cut_ratio": cut_ratio, "dofs": h.n_dofs}
        rows.append({"case": "matrix_free", **common, "mdofs": mf.mdofs,
                     "repetitions": mf.repetitions, "median_seconds": mf.median_seconds,
                     "model_bytes_per_dof": mb, "model_flops_per_dof": mfl})
        rows.append({"case": "sparse", **common, "mdofs": sp_.mdofs,
                     "repetitions": sp_.repetitions, "median_seconds": sp_.median_seconds,
                     "model_bytes_per_dof": sm.bytes_per_dof, "model_flops_per_dof": sm.flops_per_dof})
    return rows


def _median_record(records: list):
    # a real record (not an average) keeps reps, time and speed consistent
    return sorted(records, key=lambda r: r.mdofs)[(len(records) - 1) // 2]


THROUGHPUT_COLUMNS = ["case", "p", "fe", "requested_ratio", "cut_ratio", "dofs", "mdofs",
                      "repetitions", "median_seconds", "model_bytes_per_dof", "model_flops_per_dof"]


def _tensor_rule(n_q: int, dim: int = 3) -> CutCellQuadrature:
    x, w = np.polynomial.legendre.leggauss(n_q)
    x, w = 0.5 * (x + 1), 0.5 * w
    g = np.meshgrid(*([x] * dim), indexing="ij")
    pts = np.stack([gi.ravel(order="F") for gi in g], axis=-1)
    wts = np.ones(1)
    for _ in range(dim):
        wts = np.multiply.outer(w, wts).ravel()
    return CutCellQuadrature(pts, wts)


def cell_kernel_throughput(degree: int, n_cells: int = 2048, lanes: int = 4,
                           min_seconds: float = 1.0, seed: int = 0, chunk: int = 512) -> dict:
    """Per-DoF speed of the cell Laplacian kernels on ``n_cells`` uncut cells.

    The structured path uses sum factorization; the unstructured path treats
    the same tensor Gauss points as arbitrary points, as on a cut cell.
    """
    shape = K.ShapeInfo.create(degree)
    k, d = shape.k, 3
    kd = k ** d
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n_cells, kd))
    uT = np.ascontiguousarray(u.T)
    rule = _tensor_rule(shape.n_q, d)
    packs = [K.pack_rules(np.arange(m), [rule] * m, lanes, d)
             for m in {min(chunk, n_cells - s) for s in range(0, n_cells, chunk)}]
    packs = {p.entities.size: p for p in packs}
    for p in packs.values():
        K.point_tables(shape, p)

    def structured():
        for s in range(0, n_cells, chunk):
            blk = uT[:, s:s + chunk]
            v, g = K.eval_structured_cell(shape, blk.reshape(k, k, k, -1), d, trailing=1)
            K.integrate_structured_cell(shape, v, g, d, trailing=1)

    def unstructured():
        for s in range(0, n_cells, chunk):
            blk = u[s:s + chunk]
            pk = packs[len(blk)]
            v, g = K.eval_unstructured_points(shape, blk, pk)
            K.integrate_unstructured_points(shape, v, g, pk, len(blk))

    dofs = n_cells * kd
    rs = measure_throughput(structured, dofs, min_seconds)
    ru = measure_throughput(unstructured, dofs, min_seconds)
    return {"p": degree, "dofs": dofs, "structured_mdofs": rs.mdofs, "unstructured_mdofs": ru.mdofs}


# -- application geometries ---------------------------------------------------------------

def run_application_spheres(cfg: RunConfig) -> dict:
    ls = level_set_from_config(cfg.geometry)
    t0 = time.perf_counter()
    mesh = _mesh(cfg)
    h = build_dof_handler(mesh, ls, cfg.fe, cfg.degree)
    tables = build_geometry_tables(h, ls, max_subdiv=cfg.max_subdiv)
    op = CutPoissonOperator(cfg.operator_config(), h, tables, n_workers=cfg.threads)
    setup = time.perf_counter() - t0
    x = np.random.default_rng(cfg.seed).standard_normal(h.n_dofs)
    rec = measure_throughput(lambda: op.apply(x), h.n_dofs, cfg.min_seconds, h.cut_ratio)
    n_cut = len(tables.cut_cells)
    return {
        "dofs": h.n_dofs,
        "active_cells": h.n_active,
        "cut_cells": n_cut,
        "cut_ratio": h.cut_ratio,
        "cut_faces": len(tables.cut_faces),
        "points_per_cut_cell": tables.point_stats(),
        "low_order_rules": tables.n_flagged,
        "throughput": {"mdofs": rec.mdofs, "repetitions": rec.repetitions,
                       "median_seconds": rec.median_seconds},
        "setup_seconds": setup,
    }


# -- verification suites ------------------------------------------------------------------

@dataclass
class SuiteResult:
    suite: str
    case: str
    passed: bool
    worst: float | None
    tolerance: float | None
    notice: str = ""

    @property
    def skipped(self) -> bool:
        return self.worst is None


class _FlippedGhostSign(LocalTerms):
    """Fault injection: the plus-side half of the ghost penalty has its sign flipped."""

    def ghost_penalty(self, um, up, axis, lane_weight=None, lanes_last=False):
        om, op = super().ghost_penalty(um, up, axis, lane_weight, lanes_last)
        return om, -op


def build_operator(cfg: RunConfig, fe: str, degree: int, ls: LevelSet | None = None,
                   mesh: CartesianMesh | None = None, n_workers: int | None = None):
    ls = level_set_from_config(cfg.geometry) if ls is None else ls
    mesh = _mesh(cfg) if mesh is None else mesh
    h = build_dof_handler(mesh, ls, fe, degree)
    if h.n_active == 0:
        return None
    tables = build_geometry_tables(h, ls, max_subdiv=cfg.max_subdiv)
    opcfg = cfg.operator_config(fe, degree)
    op = CutPoissonOperator(opcfg, h, tables, n_workers=n_workers or cfg.threads)
    if cfg.fault == "penalty_sign":
        op.terms = _FlippedGhostSign(opcfg, h)
    return op


def check_equivalence(op, rng, n_vectors: int = 10, A=None) -> float:
    A = assemble_sparse(op) if A is None else A
    worst = 0.0
    for _ in range(n_vectors):
        x = rng.standard_normal(op.n_dofs)
        ref = spmv(A, x)
        worst = max(worst, float(np.linalg.norm(op.apply(x) - ref) / np.linalg.norm(ref)))
    return worst


def check_symmetry(op, rng, n_pairs: int = 3) -> float:
    worst = 0.0
    for _ in range(n_pairs):
        u = rng.standard_normal(op.n_dofs)
        w = rng.standard_normal(op.n_dofs)
        gap = abs(float(op.apply(u) @ w) - float(u @ op.apply(w)))
        worst = max(worst, gap / float(np.linalg.norm(u) * np.linalg.norm(w)))
    return worst


def _adjoint_gap(ev: Callable, it: Callable, u_shape, rng) -> float:
    """``|<E u, v> - <u, I v>| / (|E u| |v|)`` for random ``u`` and ``v``."""
    u = rng.standard_normal(u_shape)
    out = ev(u)
    out = out if isinstance(out, tuple) else (out,)
    v = tuple(rng.standard_normal(o.shape) for o in out)
    lhs = sum(float(np.vdot(o, vi)) for o, vi in zip(out, v))
    rhs = float(np.vdot(u, it(*v)))
    scale = math.sqrt(sum(float(np.vdot(o, o)) for o in out)) * \
        math.sqrt(sum(float(np.vdot(vi, vi)) for vi in v))
    return abs(lhs - rhs) / scale


def _random_rules(rng, n_entities: int, dim: int) -> list:
    # point counts that are not multiples of the lane width exercise the padding
    return [CutCellQuadrature(rng.random((m, dim)), rng.random(m))
            for m in rng.integers(1, 12, size=n_entities)]


def kernel_adjoint_gaps(degree: int, rng, dim: int = 3, lanes: int = 4, n: int = 5) -> dict:
    """Adjoint gap of every evaluate/integrate kernel pair at one degree."""
    sh = K.ShapeInfo.create(degree)
    k = sh.k
    cell = (n,) + (k,) * dim
    lanes_last = (k,) * dim + (n,)
    gaps = {}
    gaps["structured_values"] = _adjoint_gap(
        lambda u: K.eval_structured_values([sh.values] * dim, u, dim),
        lambda c: K.integrate_structured_values([sh.values] * dim, c, dim), cell, rng)
    gaps["structured_cell"] = _adjoint_gap(
        lambda u: K.eval_structured_cell(sh, u, dim),
        lambda v, g: K.integrate_structured_cell(sh, v, g, dim), cell, rng)
    gaps["structured_cell_lanes_last"] = _adjoint_gap(
        lambda u: K.eval_structured_cell(sh, u, dim, trailing=1),
        lambda v, g: K.integrate_structured_cell(sh, v, g, dim, trailing=1), lanes_last, rng)
    for shift in (-1, 1):
        for a in range(dim):
            gaps[f"extrapolated_axis{a}_shift{shift:+d}"] = _adjoint_gap(
                lambda u, a=a, s=shift: K.eval_extrapolated(sh, u, dim, a, s),
                lambda c, a=a, s=shift: K.integrate_extrapolated(sh, c, dim, a, s), cell, rng)
    for face in range(2 * dim):
        gaps[f"structured_face{face}"] = _adjoint_gap(
            lambda u, f=face: K.eval_structured_face(sh, u, dim, f),
            lambda v, g, f=face: K.integrate_structured_face(sh, v, g, dim, f), cell, rng)
        gaps[f"face_value_normal{face}"] = _adjoint_gap(
            lambda u, f=face: K.eval_face_value_normal(sh, u, dim, f),
            lambda v, dn, f=face: K.integrate_face_value_normal(sh, v, dn, dim, f), cell, rng)
    for a in range(dim):
        gaps[f"face_pair_axis{a}"] = _adjoint_gap(
            lambda u, a=a: K.eval_face_pair_value_normal(sh, u[:n], u[n:], dim, a),
            lambda c, a=a: np.concatenate(K.integrate_face_pair_value_normal(sh, c, dim, a)),
            (2 * n,) + (k,) * dim, rng)
    pack = K.pack_rules(np.arange(n), _random_rules(rng, n, dim), lanes, dim)
    gaps["unstructured_points"] = _adjoint_gap(
        lambda u: K.eval_unstructured_points(sh, u, pack),
        lambda v, g: K.integrate_unstructured_points(sh, v, g, pack, n), (n, k ** dim), rng)
    fpack = K.pack_rules(np.arange(n), _random_rules(rng, n, dim - 1), lanes, dim - 1)
    for face in range(2 * dim):
        gaps[f"unstructured_face{face}"] = _adjoint_gap(
            lambda u, f=face: K.eval_unstructured_face_points(sh, u, dim, f, fpack),
            lambda v, g, f=face: K.integrate_unstructured_face_points(sh, v, g, dim, f, fpack, n),
            (n, k ** dim), rng)
        gaps[f"face_points_value_normal{face}"] = _adjoint_gap(
            lambda u, f=face: K.eval_face_points_value_normal(sh, u, dim, f, fpack),
            lambda v, dn, f=face: K.integrate_face_points_value_normal(sh, v, dn, dim, f, fpack, n),
            (n, k ** dim), rng)
    return gaps


def sphere_moments(n: int = 24, n_q: int = 4, max_subdiv: int = MAX_SUBDIV) -> tuple[float, float]:
    """Volume and area of the unit sphere summed over an ``n^3`` mesh of the standard box."""
    ls = Sphere(np.zeros(3), 1.0)
    mesh = build_mesh(BOX_ORIGIN, BOX_EXTENT, n, 0, 3)
    h = build_dof_handler(mesh, ls, "dg", 1)
    vol = len(h.cells_of(CellCategory.INSIDE)) * float(np.prod(mesh.h))
    area = 0.0
    cut = h.cells_of(CellCategory.INTERSECTED)
    lo, hi = mesh.cell_bounds(cut)
    for i in range(len(cut)):
        vol += float(generate_cut_volume_quadrature(ls, lo[i], hi[i], n_q, max_subdiv).weights.sum())
        area += float(generate_surface_quadrature(ls, lo[i], hi[i], n_q, max_subdiv).weights.sum())
    return vol, area


def complement_gap(ls: LevelSet, mesh: CartesianMesh, n_q: int = 3, max_subdiv: int = MAX_SUBDIV,
                   max_cells: int = 64) -> float:
    """Worst ``|sum_in + sum_out - |cell|| / |cell|`` over (up to ``max_cells``) cut cells."""
    h = build_dof_handler(mesh, ls, "dg", 1)
    cut = h.cells_of(CellCategory.INTERSECTED)[:max_cells]
    lo, hi = mesh.cell_bounds(cut)
    comp = Complement(ls)
    cell = float(np.prod(mesh.h))
    worst = 0.0
    for i in range(len(cut)):
        a = generate_cut_volume_quadrature(ls, lo[i], hi[i], n_q, max_subdiv).weights.sum()
        b = generate_cut_volume_quadrature(comp, lo[i], hi[i], n_q, max_subdiv).weights.sum()
        worst = max(worst, abs(float(a + b) - cell) / cell)
    return worst


def _two_cell_terms(degree: int, tau_v: float, axis: int, h: float = 1.0) -> LocalTerms:
    cells = [1, 1, 1]
    cells[axis] = 2
    mesh = CartesianMesh(np.zeros(3), h * np.asarray(cells, dtype=float), tuple(cells))
    far = Plane(np.array([1.0, 0.0, 0.0]), 10.0 * h)
    handler = build_dof_handler(mesh, far, "dg", degree)
    return LocalTerms(OperatorConfig("dg", degree, tau_v=tau_v), handler)


def ghost_penalty_polynomial_residual(degree: int, rng, tau_v: float = 1.0, n_polys: int = 3) -> float:
    """Largest ghost-penalty output for global tensor polynomials of degree <= ``degree``.

    Each polynomial is scaled to unit maximum nodal value on the two-cell patch.
    """
    sh = K.ShapeInfo.create(degree)
    nodes = sh.nodes
    k = sh.k
    worst = 0.0
    for axis in range(3):
        terms = _two_cell_terms(degree, tau_v, axis)
        for _ in range(n_polys):
            coef = rng.standard_normal((k, k, k))  # coef[i, j, l] multiplies x^i y^j z^l

            def nodal(shift):
                z, y, x = np.meshgrid(nodes, nodes, nodes, indexing="ij")
                pos = [x, y, z]
                pos[axis] = pos[axis] + shift
                return np.polynomial.polynomial.polyval3d(pos[0], pos[1], pos[2], coef).ravel()

            um, up = nodal(0.0), nodal(1.0)
            # unit-size polynomial on the patch so the tolerance is scale free
            scale = max(np.abs(um).max(), np.abs(up).max())
            om, op = terms.ghost_penalty(um[None] / scale, up[None] / scale, axis)
            worst = max(worst, float(np.abs(om).max()), float(np.abs(op).max()))
    return worst


def ghost_penalty_unit_jump(degree: int, tau_v: float = 1.0, axis: int = 0, h: float = 1.0) -> float:
    """``u^T G u`` for ``u = 1`` on the minus cell and ``0`` on the plus cell of size ``h``."""
    terms = _two_cell_terms(degree, tau_v, axis, h)
    kd = (degree + 1) ** 3
    um, up = np.ones((1, kd)), np.zeros((1, kd))
    om, op = terms.ghost_penalty(um, up, axis)
    return (om @ um.T + op @ up.T).item()


def run_verify(cfg: RunConfig) -> list[SuiteResult]:
    rng = np.random.default_rng(cfg.seed)
    fes = [cfg.fe] if cfg.fe else ["cg", "dg"]
    degrees = [cfg.degree] if cfg.degree else [1, 2, 3]
    out: list[SuiteResult] = []
    ls = level_set_from_config(cfg.geometry)
    mesh = _mesh(cfg)
    for fe in fes:
        for p in degrees:
            case = f"{fe} p={p}"
            op = build_operator(cfg, fe, p, ls, mesh)
            if op is None:
                for s in ("equivalence", "symmetry"):
                    out.append(SuiteResult(s, case, True, None, None, "empty active set, skipped"))
                continue
            out.append(SuiteResult("equivalence", case, None, check_equivalence(op, rng), 1e-11))
            out.append(SuiteResult("symmetry", case, None, check_symmetry(op, rng), 1e-11))
    for p in sorted(set(degrees) | {1, 2, 3, 4}):
        gaps = kernel_adjoint_gaps(p, rng, lanes=cfg.lanes)
        name, worst = max(gaps.items(), key=lambda kv: kv[1])
        out.append(SuiteResult("adjointness", f"p={p} ({len(gaps)} kernel pairs, worst {name})",
                               None, worst, 1e-12))
    # quadrature moments
    half = generate_cut_volume_quadrature(Plane(np.array([1.0, 0.0, 0.0]), 0.5), np.zeros(3), np.ones(3), 3)
    out.append(SuiteResult("quadrature", "plane-cut unit cell volume", None,
                           abs(float(half.weights.sum()) - 0.5), 1e-14))
    h0 = build_dof_handler(mesh, ls, "dg", 1)
    if np.any(h0.cell_category == CellCategory.INTERSECTED):
        out.append(SuiteResult("quadrature", "complement identity", None,
                               complement_gap(ls, mesh, max_subdiv=cfg.max_subdiv), 1e-12))
    else:
        out.append(SuiteResult("quadrature", "complement identity", True, None, None,
                               "no intersected cells, skipped"))
    vol, area = sphere_moments(24)
    out.append(SuiteResult("quadrature", "sphere volume 24^3", None, abs(vol - 4 * math.pi / 3), 1e-6))
    out.append(SuiteResult("quadrature", "sphere area 24^3", None, abs(area - 4 * math.pi), 1e-5))
    for p in (1, 2, 3, 4):
        out.append(SuiteResult("ghost_penalty", f"polynomial exactness p={p}", None,
                               ghost_penalty_polynomial_residual(p, rng, cfg.tau_v), 1e-11))
    gp = ghost_penalty_unit_jump(max(degrees), cfg.tau_v)
    out.append(SuiteResult("ghost_penalty", "unit jump = 2 tau_v h", None,
                           abs(gp - 2 * cfg.tau_v) / max(2 * cfg.tau_v, 1e-300), 1e-12))
    for r in out:
        if r.passed is None:
            r.passed = bool(r.worst <= r.tolerance)
    return out


# -- cost model -----------------------------------------------------------------------------

def run_cost_model(cfg: RunConfig) -> list[dict]:
    degrees = cfg.degrees or ([cfg.degree] if cfg.degree else list(range(1, 8)))
    fes = [cfg.fe] if cfg.fe else ["cg", "dg"]
    rows = []
    for method in ("sparse", "mf_structured", "mf_unstructured"):
        for fe in fes:
            for p in degrees:
                rows.append(CostModel(method, fe, int(p), lanes=cfg.lanes).row())
    return rows


COST_COLUMNS = ["method", "fe", "p", "bytes_per_dof", "flops_per_dof", "intensity"]
