"""Command-line driver: ``cutfem-mf --command {convergence,throughput-plane,spheres,verify,cost-model}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from .experiments import (COMMANDS, CONVERGENCE_COLUMNS, COST_COLUMNS, THROUGHPUT_COLUMNS,
                          ConfigError, RunConfig, cell_kernel_throughput, resolve_config,
                          run_application_spheres, run_convergence, run_cost_model,
                          run_throughput_plane, run_verify)
from .perf import MachineParams, roofline_point, write_json, write_table

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2

# CLI flag -> config key
_FLAGS = {"command": "command", "fe": "fe", "degree": "degree", "refinements": "refinements",
          "lanes": "lanes", "threads": "threads", "tau_v": "tau_v", "tau_d": "tau_d",
          "gamma": "gamma", "seed": "seed", "out": "out"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cutfem-mf", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON run config; command-line flags override it")
    ap.add_argument("--command", choices=COMMANDS)
    ap.add_argument("--fe", choices=("cg", "dg"))
    ap.add_argument("--degree", type=int)
    ap.add_argument("--refinements", type=int, help="number of meshes in the convergence ladder")
    ap.add_argument("--lanes", type=int)
    ap.add_argument("--threads", type=int, help="worker count (default: available cores)")
    ap.add_argument("--tau-v", dest="tau_v", type=float, help="ghost-penalty parameter")
    ap.add_argument("--tau-d", dest="tau_d", type=float, help="Nitsche penalty parameter")
    ap.add_argument("--gamma", type=float, help="interior-penalty parameter (DG)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output file (CSV or JSON); stdout if omitted")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args: argparse.Namespace) -> RunConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for flag, key in _FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            raw[key] = v
    return resolve_config(raw)


def _target(cfg: RunConfig, suffix: str = ""):
    if cfg.out is None:
        return sys.stdout
    if not suffix:
        return cfg.out
    stem, dot, ext = cfg.out.rpartition(".")
    return f"{stem}{suffix}.{ext}" if dot else f"{cfg.out}{suffix}"


def _emit_table(cfg, rows, columns, suffix=""):
    write_table(_target(cfg, suffix), rows, cfg.to_dict(), columns)


def _emit_json(cfg, payload):
    write_json(_target(cfg), payload, cfg.to_dict())


def _convergence(cfg: RunConfig) -> int:
    def progress(row):
        logging.getLogger(__name__).info("refinement %s: %s", row["refinement"], row)

    rows = run_convergence(cfg, progress)
    _emit_table(cfg, rows, CONVERGENCE_COLUMNS)
    return EXIT_OK


def _throughput(cfg: RunConfig) -> int:
    rows = run_throughput_plane(cfg)
    kern = cell_kernel_throughput(cfg.degree, cfg.kernel_cells, cfg.lanes, cfg.min_seconds, cfg.seed)
    for case, key in (("cell_kernel_structured", "structured_mdofs"),
                      ("cell_kernel_unstructured", "unstructured_mdofs")):
        rows.append({"case": case, "p": cfg.degree, "fe": cfg.fe, "dofs": kern["dofs"],
                     "mdofs": kern[key]})
    _emit_table(cfg, rows, THROUGHPUT_COLUMNS)
    return EXIT_OK


def _spheres(cfg: RunConfig) -> int:
    _emit_json(cfg, run_application_spheres(cfg))
    return EXIT_OK


def _verify(cfg: RunConfig) -> int:
    results = run_verify(cfg)
    ok = all(r.passed for r in results)
    for r in results:
        status = "SKIP" if r.skipped else ("PASS" if r.passed else "FAIL")
        detail = r.notice or f"worst {r.worst:.3e} <= {r.tolerance:.0e}"
        print(f"{status} {r.suite:<13} {r.case}: {detail}", file=sys.stderr)
    _emit_json(cfg, {"passed": ok, "suites": [asdict(r) for r in results]})
    return EXIT_OK if ok else EXIT_VERIFY


def _cost_model(cfg: RunConfig) -> int:
    rows = run_cost_model(cfg)
    _emit_table(cfg, rows, COST_COLUMNS)
    if cfg.machine is not None:
        try:
            machine = (MachineParams.from_json(cfg.machine) if isinstance(cfg.machine, str)
                       else MachineParams(float(cfg.machine["bandwidth_gbs"]),
                                          float(cfg.machine["peak_gflops"])))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid machine parameters: {exc}") from exc
        roof = [roofline_point(machine, r["intensity"], None, f"{r['method']} {r['fe']} p={r['p']}").row()
                for r in rows]
        _emit_table(cfg, roof, ["label", "intensity", "gflops", "attainable"], "_roofline")
    return EXIT_OK


_DISPATCH = {"convergence": _convergence, "throughput-plane": _throughput, "spheres": _spheres,
             "verify": _verify, "cost-model": _cost_model}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return _DISPATCH[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
