"""Preconditioned conjugate gradients (none, Jacobi or cell blocks) and error measurement."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import DofHandler


class ConvergenceError(RuntimeError):
    pass


class IndefiniteOperatorError(ArithmeticError):
    pass


PRECONDITIONERS = ("none", "jacobi", "cell_block")


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    preconditioner: str = "jacobi"

    def __post_init__(self):
        if not 0 < self.tolerance < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residuals: list = field(default_factory=list)      # relative residual norms
    precond_residuals: list = field(default_factory=list)  # sqrt(r^T M^-1 r), relative

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for i, r in enumerate(self.residuals):
                w.writerow([i, repr(float(r))])


class CellBlockPreconditioner:
    """Additive Schwarz over cells: ``z = sum_c R_c^T A_c^{-1} R_c r``.

    ``blocks[c]`` is the principal submatrix of the operator on the DoFs
    ``cell_dofs[c]``. For DG the cells do not overlap and this is block Jacobi.
    """

    def __init__(self, blocks: np.ndarray, cell_dofs: np.ndarray, n_dofs: int):
        blocks = np.asarray(blocks, dtype=float)
        try:
            np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteOperatorError("a cell block is not positive definite") from exc
        self.inverse = np.linalg.inv(blocks)
        self.inverse = 0.5 * (self.inverse + self.inverse.transpose(0, 2, 1))
        self.cell_dofs = np.asarray(cell_dofs)
        self.n_dofs = int(n_dofs)
        flat = self.cell_dofs.ravel()
        self._disjoint = len(np.unique(flat)) == len(flat)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        local = np.einsum("cij,cj->ci", self.inverse, r[self.cell_dofs])
        if self._disjoint:
            z = np.zeros(self.n_dofs)
            z[self.cell_dofs] = local
            return z
        return np.bincount(self.cell_dofs.ravel(), local.ravel(), minlength=self.n_dofs)


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    # np.dot on contiguous float64 uses a fixed blocking, reproducible for fixed sizes
    return float(np.dot(a, b))


def cg_solve(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
             config: SolverConfig = SolverConfig(), diagonal: np.ndarray | None = None,
             x0: np.ndarray | None = None,
             preconditioner: Callable[[np.ndarray], np.ndarray] | None = None,
             callback: Callable[[np.ndarray], None] | None = None) -> SolveResult:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops when ``|b - A x| <= tol |b|``. With the Jacobi preconditioner the
    diagonal must be supplied (assembled or probed); ``cell_block`` needs a
    :class:`CellBlockPreconditioner` passed as ``preconditioner``.
    ``callback(x)`` sees the iterate after every update.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    if config.preconditioner == "jacobi":
        if diagonal is None:
            raise ValueError("Jacobi preconditioning needs the operator diagonal")
        diagonal = np.asarray(diagonal, dtype=float)
        if np.any(diagonal <= 0):
            raise IndefiniteOperatorError("operator diagonal has nonpositive entries")
        inv_diag = 1.0 / diagonal
        precond = lambda r: inv_diag * r  # noqa: E731
    elif config.preconditioner == "cell_block":
        if preconditioner is None:
            raise ValueError("cell_block preconditioning needs a CellBlockPreconditioner")
        precond = preconditioner
    else:
        precond = lambda r: r.copy()  # noqa: E731
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = math.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), 0, [0.0], [0.0])
    r = b - apply(x) if x0 is not None else b.copy()
    z = precond(r)
    p = z.copy()
    rz = _dot(r, z)
    rz0 = rz
    hist = [math.sqrt(_dot(r, r)) / bnorm]
    phist = [1.0]
    if hist[-1] <= config.tolerance:
        return SolveResult(x, 0, hist, phist)
    for it in range(1, config.max_iterations + 1):
        q = apply(p)
        pq = _dot(p, q)
        if pq <= 0:
            raise IndefiniteOperatorError(f"p^T A p = {pq:.3e} <= 0 at iteration {it}")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        if callback is not None:
            callback(x)
        hist.append(math.sqrt(_dot(r, r)) / bnorm)
        z = precond(r)
        rz_new = _dot(r, z)
        phist.append(math.sqrt(max(rz_new, 0.0) / rz0))
        if hist[-1] <= config.tolerance:
            return SolveResult(x, it, hist, phist)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"no convergence in {config.max_iterations} iterations "
                           f"(relative residual {hist[-1]:.3e})")


def probe_diagonal(apply: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    """Diagonal by unit-vector probing; ``n`` operator applications."""
    out = np.empty(n)
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        out[i] = apply(e)[i]
        e[i] = 0.0
    return out


@dataclass
class ErrorReport:
    l2_rel_error: float
    dofs: int
    h_over_L: float
    iterations: int = 0
    wall_time: float = 0.0

    def __post_init__(self):
        if self.l2_rel_error < 0:
            raise ValueError("error must be nonnegative")


def compute_l2_error(handler: DofHandler, tables, x: np.ndarray, u_exact: Callable,
                     iterations: int = 0, wall_time: float = 0.0) -> ErrorReport:
    """Relative L2 error over Omega using the structured and cut rules."""
    from .operators import evaluate_at_points

    if len(x) != handler.n_dofs:
        raise ValueError("solution vector does not match the DoF handler")
    pts, uh, jxw = evaluate_at_points(handler, tables, np.asarray(x, dtype=float))
    ue = u_exact(pts) if len(pts) else np.empty(0)
    den = float(np.sum(jxw * ue ** 2))
    if den == 0.0:
        raise ZeroDivisionError("analytic solution has zero L2 norm on the domain")
    num = float(np.sum(jxw * (uh - ue) ** 2))
    h_over_L = float(handler.mesh.h_min / handler.mesh.extent.max())
    return ErrorReport(math.sqrt(num / den), handler.n_dofs, h_over_L, iterations, wall_time)


def estimate_eoc(e_coarse: float, e_fine: float) -> float:
    if e_coarse <= 0 or e_fine <= 0:
        raise ValueError("errors must be positive")
    return math.log2(e_coarse / e_fine)


def solve_timed(apply, b, config, diagonal=None, preconditioner=None):
    t0 = time.perf_counter()
    res = cg_solve(apply, b, config, diagonal, preconditioner=preconditioner)
    return res, time.perf_counter() - t0
