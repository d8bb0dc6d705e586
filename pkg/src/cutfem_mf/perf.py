"""Analytic cost models, instrumented FLOP counts, throughput timing and roofline rows."""
from __future__ import annotations

import contextlib
import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

from . import kernels as K

SCHEMA_VERSION = 1

KERNEL_KINDS = ("structured_cell", "structured_face", "unstructured_cell", "unstructured_face")
METHODS = ("sparse", "mf_structured", "mf_unstructured")


class TimerResolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MachineParams:
    bandwidth_gbs: float
    peak_gflops: float

    def __post_init__(self):
        if not (self.bandwidth_gbs > 0 and self.peak_gflops > 0):
            raise ValueError("bandwidth and peak must be positive")

    @property
    def ridge(self) -> float:
        return self.peak_gflops / self.bandwidth_gbs

    @classmethod
    def from_json(cls, path) -> "MachineParams":
        with open(path) as fh:
            d = json.load(fh)
        return cls(float(d["bandwidth_gbs"]), float(d["peak_gflops"]))


# -- kernel operation counts -------------------------------------------------------------

def _sumfact(k: int, n_q: int, dim: int) -> int:
    """FMAs of interpolating ``k^dim`` values to ``n_q^dim`` points, one axis at a time."""
    return sum(k ** (dim - a) * n_q ** (a + 1) for a in range(dim))


def _point_value(k: int, dim: int) -> int:
    return sum(k ** (dim - j) for j in range(dim))


def _point_gradient(k: int, dim: int) -> int:
    return k ** dim + sum((j + 1) * k ** (dim - j) for j in range(1, dim))


def model_kernel_fmas(kind: str, k: int, n_q: int, dim: int = 3, n_points: int | None = None) -> int:
    """Multiply-adds of one evaluation (values and gradients) of a single entity.

    For the unstructured kinds ``n_points`` defaults to ``n_q^dim`` (cells) or
    ``n_q^(dim-1)`` (faces).
    """
    if k < 1 or n_q < 1:
        raise ValueError("k and n_q must be >= 1")
    if kind == "structured_cell":
        return _sumfact(k, n_q, dim) + dim * n_q ** (dim + 1)
    if kind == "structured_face":
        inface = _sumfact(k, n_q, dim - 1)
        return inface + (dim - 1) * n_q ** dim + k ** dim + inface
    if kind == "unstructured_cell":
        n = n_q ** dim if n_points is None else n_points
        return n * (_point_value(k, dim) + _point_gradient(k, dim))
    if kind == "unstructured_face":
        n = n_q ** (dim - 1) if n_points is None else n_points
        m = dim - 1
        return n * (_point_value(k, m) + _point_gradient(k, m)) + k ** dim + n * _point_value(k, m)
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")


def padded_points(n_q: int, lanes: int, dim: int, n_ref: int = 0, total_count: bool = False) -> int:
    """Padded point count of one cell (``dim``-dimensional tensor of ``n_q 2^n_ref`` points).

    Default pads each direction to a multiple of ``lanes`` before taking the
    power; ``total_count`` pads the total number of points instead.
    """
    n1 = n_q * 2 ** n_ref
    if total_count:
        return math.ceil(n1 ** dim / lanes) * lanes
    return (math.ceil(n1 / lanes) * lanes) ** dim


# -- per-DoF models ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    method: str
    fe_kind: str
    degree: int
    dim: int = 3
    lanes: int = 8
    n_ref: int = 0
    total_count_padding: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.fe_kind not in ("cg", "dg"):
            raise ValueError(f"unknown fe kind {self.fe_kind!r}")
        if self.degree < 1 or self.dim < 1 or self.lanes < 1 or self.n_ref < 0:
            raise ValueError("invalid cost model parameters")

    @property
    def bytes_per_dof(self) -> float:
        return model_bytes_per_dof(self)

    @property
    def flops_per_dof(self) -> float:
        return model_flops_per_dof(self)

    @property
    def intensity(self) -> float:
        return self.flops_per_dof / self.bytes_per_dof

    def row(self) -> dict:
        return {"method": self.method, "fe": self.fe_kind, "p": self.degree,
                "bytes_per_dof": self.bytes_per_dof, "flops_per_dof": self.flops_per_dof,
                "intensity": self.intensity}


def model_bytes_per_dof(m: CostModel) -> float:
    p, d, W = m.degree, m.dim, m.lanes
    k = p + 1
    if m.method == "sparse":
        return 12.0 * (p + 2) ** d if m.fe_kind == "cg" else 12.0 * (2 * d + 1) * k ** d
    if m.method == "mf_structured":
        if m.fe_kind == "cg":
            return (14 / W) / p ** d + k ** d / p ** d * 4 + 24
        return (14 / W + 2 * d * (4 + 18 / W)) / k ** d + 24
    nq_cell = padded_points(k, W, d, m.n_ref, m.total_count_padding)
    if m.fe_kind == "cg":
        return (25 + 14 / W) / p ** d + nq_cell / p ** d * 32 + k ** d / p ** d * 4 + 24
    nq_face = padded_points(k, W, d - 1, m.n_ref, m.total_count_padding)
    return (((25 + 14 / W) + 2 * d * (29 + 18 / W)) / k ** d + nq_cell / k ** d * 32
            + 2 * d * nq_face / k ** d * 24 + 24)


def model_flops_per_dof(m: CostModel) -> float:
    """FLOPs per DoF; matrix-free kernels count evaluate + integrate at 2 FLOPs per FMA."""
    p, d = m.degree, m.dim
    k = p + 1
    if m.method == "sparse":
        return 2.0 * (p + 2) ** d if m.fe_kind == "cg" else 2.0 * (2 * d + 1) * k ** d
    unique = p ** d if m.fe_kind == "cg" else k ** d
    if m.method == "mf_structured":
        cell = model_kernel_fmas("structured_cell", k, k, d)
        face = model_kernel_fmas("structured_face", k, k, d)
    else:
        nq1 = k * 2 ** m.n_ref
        cell = model_kernel_fmas("unstructured_cell", k, nq1, d)
        face = model_kernel_fmas("unstructured_face", k, nq1, d)
    flops = 4.0 * cell
    if m.fe_kind == "dg":
        # d faces per cell, each evaluated and integrated from both sides
        flops += d * 2 * 4.0 * face
    return flops / unique


# -- instrumentation ------------------------------------------------------------------------------

def counted_flops(fn: Callable, *args, **kwargs) -> int:
    """FLOPs (2 per multiply-add) executed by kernels during ``fn(*args, **kwargs)``."""
    with K.count_fmas() as c:
        fn(*args, **kwargs)
    return c.flops


# -- throughput -----------------------------------------------------------------------------------

@dataclass
class ThroughputRecord:
    dofs: int
    repetitions: int
    seconds: float          # repetitions x median repetition time
    mdofs: float
    cut_ratio: float | None = None
    median_seconds: float = 0.0
    elapsed_seconds: float = 0.0

    def __post_init__(self):
        if self.cut_ratio is not None and not 0.0 <= self.cut_ratio <= 1.0:
            raise ValueError("cut ratio must lie in [0, 1]")


def measure_throughput(apply: Callable[[], object], dofs: int, min_seconds: float = 1.0,
                       cut_ratio: float | None = None, warmup: int = 1,
                       min_repetitions: int = 3, clock: Callable[[], float] = time.perf_counter
                       ) -> ThroughputRecord:
    """Repeat ``apply()`` until ``min_seconds`` elapsed; speed from the median repetition."""
    for _ in range(warmup):
        apply()
    times = []
    start = clock()
    while True:
        t0 = clock()
        apply()
        times.append(clock() - t0)
        if len(times) >= min_repetitions and clock() - start >= min_seconds:
            break
    med = statistics.median(times)
    resolution = time.get_clock_info("perf_counter").resolution
    if med <= 10 * resolution:
        raise TimerResolutionError(f"median repetition {med:.3e}s is below timer resolution")
    reps = len(times)
    return ThroughputRecord(int(dofs), reps, reps * med, dofs / med / 1e6, cut_ratio, med,
                            clock() - start)


@dataclass(frozen=True)
class RooflinePoint:
    label: str
    intensity: float
    gflops: float | None
    attainable: float
    efficiency: float | None

    def row(self) -> dict:
        return {"label": self.label, "intensity": self.intensity, "gflops": self.gflops,
                "attainable": self.attainable}


def roofline_point(machine: MachineParams, intensity: float, gflops: float | None = None,
                   label: str = "") -> RooflinePoint:
    if intensity < 0:
        raise ValueError("intensity must be nonnegative")
    att = min(machine.peak_gflops, machine.bandwidth_gbs * intensity)
    eff = None if gflops is None or att == 0 else gflops / att
    return RooflinePoint(label, float(intensity), gflops, att, eff)


# -- reports -----------------------------------------------------------------------------------------

def _open(target):
    """``target`` is a path or an already open text stream (left open)."""
    if hasattr(target, "write"):
        return contextlib.nullcontext(target)
    return open(target, "w", newline="")


def write_table(path, rows: Iterable[dict], config: dict, columns: list[str] | None = None) -> None:
    """CSV with ``#`` header lines carrying the schema version and resolved config."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with _open(path) as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        fh.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return "" if v is None else v


def read_table(path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_table`; values are returned as strings."""
    meta = {}
    with open(path) as fh:
        lines = fh.readlines()
    body = []
    for line in lines:
        if line.startswith("# schema_version:"):
            meta["schema_version"] = int(line.split(":", 1)[1])
        elif line.startswith("# config:"):
            meta["config"] = json.loads(line.split(":", 1)[1])
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def write_json(path, payload: dict, config: dict) -> None:
    out = {"schema_version": SCHEMA_VERSION, "config": config, **payload}
    with _open(path) as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
