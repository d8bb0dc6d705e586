from __future__ import annotations

import json

import pytest

from cutfem_mf.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main
from cutfem_mf.experiments import COMMAND_DEFAULTS, ConfigError, resolve_config
from cutfem_mf.perf import SCHEMA_VERSION, read_table

FAST_THROUGHPUT = {"plane_cells": 60, "min_seconds": 0.02, "kernel_cells": 16}


def _run(tmp_path, cfg: dict, *flags, name="out.csv"):
    cpath = tmp_path / "cfg.json"
    cpath.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main(["--config", str(cpath), "--out", str(out), *flags])
    return code, out


def _without_out(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "out"}


# -- configuration -------------------------------------------------------------------

def test_defaults_fill_per_command():
    cfg = resolve_config({"command": "convergence"})
    assert cfg.mesh["n"] == 12 and cfg.mesh["origin"] == pytest.approx(-1.035)
    assert cfg.fe == "cg" and cfg.degree == 1 and cfg.refinements == 3
    assert cfg.threads >= 1
    assert resolve_config({"command": "spheres"}).geometry == COMMAND_DEFAULTS["spheres"]["geometry"]


def test_mesh_override_merges_with_defaults():
    cfg = resolve_config({"command": "convergence", "mesh": {"n": 4}})
    assert cfg.mesh["n"] == 4 and cfg.mesh["extent"] == pytest.approx(2.07)


def test_random_spheres_take_the_run_seed():
    cfg = resolve_config({"command": "spheres", "geometry": {"type": "sphere_random", "n": 3}, "seed": 7})
    assert cfg.geometry["seed"] == 7


@pytest.mark.parametrize("raw", [
    {"command": "launch"},
    {"colour": "blue"},
    {"fe": "hdg"},
    {"degree": 0},
    {"refinements": 0},
    {"lanes": 3},
    {"threads": 0},
    {"tau_v": -1.0},
    {"tau_d": 0.0},
    {"ratios": [0.5, 2.0]},
    {"rounds": 0},
    {"fault": "bitflip"},
    {"geometry": {"type": "torus"}},
    {"mesh": {"n": 0}},
])
def test_invalid_config_raises(raw):
    with pytest.raises(ConfigError):
        resolve_config(raw)


def test_bad_config_file_exits_2(tmp_path, capsys):
    code, _ = _run(tmp_path, {"command": "cost-model", "unknown_key": 1})
    assert code == EXIT_CONFIG
    assert "unknown config keys" in capsys.readouterr().err
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad)]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["--command", "cost-model", "--lanes", "5"]) == EXIT_CONFIG


def test_unknown_flag_value_is_rejected_by_parser():
    with pytest.raises(SystemExit) as exc:
        main(["--command", "dance"])
    assert exc.value.code == 2


# -- cost model ----------------------------------------------------------------------

def test_cost_model_csv(tmp_path):
    code, out = _run(tmp_path, {"command": "cost-model", "degrees": [1, 3]},
                     "--fe", "cg", "--lanes", "8")
    assert code == EXIT_OK
    meta, rows = read_table(out)
    assert meta["schema_version"] == SCHEMA_VERSION
    assert meta["config"]["lanes"] == 8 and meta["config"]["fe"] == "cg"
    table = {(r["method"], int(r["p"])): r for r in rows}
    assert float(table["sparse", 1]["bytes_per_dof"]) == 324
    assert float(table["sparse", 1]["flops_per_dof"]) == 54
    assert float(table["mf_structured", 3]["bytes_per_dof"]) == pytest.approx(33.55, abs=5e-3)
    assert len(rows) == 6


def test_cost_model_with_roofline(tmp_path):
    code, out = _run(tmp_path, {"command": "cost-model", "degree": 1,
                                "machine": {"bandwidth_gbs": 680, "peak_gflops": 3196}})
    assert code == EXIT_OK
    meta, roof = read_table(tmp_path / "out_roofline.csv")
    assert meta["config"]["machine"]["bandwidth_gbs"] == 680
    sparse = next(r for r in roof if r["label"] == "sparse cg p=1")
    assert float(sparse["attainable"]) == pytest.approx(680 * 54 / 324)


def test_cost_model_bad_machine_exits_2(tmp_path):
    code, _ = _run(tmp_path, {"command": "cost-model", "machine": {"bandwidth_gbs": 1}})
    assert code == EXIT_CONFIG


# -- verify ---------------------------------------------------------------------------

def test_verify_small_passes(tmp_path, capsys):
    code, out = _run(tmp_path, {"command": "verify", "mesh": {"n": 4}}, "--fe", "dg", "--degree", "2",
                     name="v.json")
    err = capsys.readouterr().err
    assert code == EXIT_OK, err
    report = json.loads(out.read_text())
    assert report["passed"] and report["schema_version"] == SCHEMA_VERSION
    assert report["config"]["fe"] == "dg"
    suites = {s["suite"] for s in report["suites"]}
    assert suites == {"equivalence", "symmetry", "adjointness", "quadrature", "ghost_penalty"}
    assert "FAIL" not in err and err.count("PASS") == len(report["suites"])


def test_verify_detects_flipped_penalty_sign(tmp_path, capsys):
    code, out = _run(tmp_path, {"command": "verify", "mesh": {"n": 4}, "fault": "penalty_sign"},
                     "--fe", "cg", "--degree", "1", name="v.json")
    assert code == EXIT_VERIFY
    report = json.loads(out.read_text())
    failed = {s["suite"] for s in report["suites"] if not s["passed"]}
    assert "symmetry" in failed
    assert "FAIL symmetry" in capsys.readouterr().err


def test_verify_empty_active_set_skips(tmp_path, capsys):
    far = {"type": "sphere", "center": [10.0, 10.0, 10.0], "radius": 0.5}
    code, out = _run(tmp_path, {"command": "verify", "geometry": far, "mesh": {"n": 3}},
                     "--fe", "cg", "--degree", "1", name="v.json")
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    skipped = [s for s in report["suites"] if s["worst"] is None]
    assert {s["suite"] for s in skipped} >= {"equivalence", "symmetry"}
    assert all("skipped" in s["notice"] for s in skipped)
    assert "SKIP equivalence" in capsys.readouterr().err


@pytest.mark.slow
def test_verify_default_config_passes(capsys):
    assert main(["--command", "verify"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().err


# -- convergence ------------------------------------------------------------------------

def test_small_convergence_run(tmp_path):
    code, out = _run(tmp_path, {"command": "convergence", "mesh": {"n": 4}, "preconditioner": "jacobi"},
                     "--fe", "dg", "--degree", "1", "--refinements", "2")
    assert code == EXIT_OK
    meta, rows = read_table(out)
    assert meta["config"]["refinements"] == 2
    assert [int(r["refinement"]) for r in rows] == [0, 1]
    errs = [float(r["l2_rel_error"]) for r in rows]
    assert errs[1] < errs[0]
    # 4^3 -> 8^3 is pre-asymptotic; rates are checked by the acceptance suite
    assert rows[0]["eoc"] == "" and float(rows[1]["eoc"]) > 0.0
    assert int(rows[1]["dofs"]) > int(rows[0]["dofs"])


# -- throughput -------------------------------------------------------------------------

def test_small_throughput_run(tmp_path):
    code, out = _run(tmp_path, {"command": "throughput-plane", **FAST_THROUGHPUT}, "--degree", "1")
    assert code == EXIT_OK
    meta, rows = read_table(out)
    assert meta["config"]["plane_cells"] == 60
    plane = [r for r in rows if r["requested_ratio"] != ""]
    assert {r["case"] for r in plane} == {"matrix_free", "sparse"}
    assert sorted({float(r["requested_ratio"]) for r in plane}) == [0.0, 0.01, 0.1, 0.5, 1.0]
    for r in plane:
        assert 0.0 <= float(r["cut_ratio"]) <= 1.0
        assert float(r["mdofs"]) > 0
        assert float(r["model_bytes_per_dof"]) > 0 and float(r["model_flops_per_dof"]) > 0
    assert {r["case"] for r in rows} >= {"cell_kernel_structured", "cell_kernel_unstructured"}


# -- application spheres ----------------------------------------------------------------------

SPHERES = {"command": "spheres", "geometry": {"type": "sphere_grid", "n": 2},
           "mesh": {"n": 8, "origin": -1.05, "extent": 2.1}, "min_seconds": 0.02}


def test_spheres_summary(tmp_path):
    code, out = _run(tmp_path, SPHERES, "--degree", "1", name="s.json")
    assert code == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["schema_version"] == SCHEMA_VERSION and rep["config"]["geometry"]["n"] == 2
    assert 0.0 < rep["cut_ratio"] < 1.0
    stats = rep["points_per_cut_cell"]
    assert stats["max"] >= stats["mean"] > 0
    assert rep["throughput"]["mdofs"] > 0


def test_spheres_random_same_seed_same_geometry(tmp_path):
    cfg = {**SPHERES, "geometry": {"type": "sphere_random", "n": 4}}
    reps = []
    for i in range(2):
        code, out = _run(tmp_path, cfg, "--seed", "5", name=f"s{i}.json")
        assert code == EXIT_OK
        reps.append(json.loads(out.read_text()))
    for key in ("dofs", "active_cells", "cut_cells", "cut_ratio", "points_per_cut_cell"):
        assert reps[0][key] == reps[1][key]
    assert _without_out(reps[0]["config"]) == _without_out(reps[1]["config"])
    code, out = _run(tmp_path, cfg, "--seed", "6", name="s2.json")
    assert json.loads(out.read_text())["config"]["geometry"]["seed"] == 6


# -- reruns -------------------------------------------------------------------------------------

def test_rerun_gives_identical_non_timing_columns(tmp_path):
    cfg = {"command": "convergence", "mesh": {"n": 4}, "preconditioner": "jacobi"}
    tables = []
    for i in range(2):
        code, out = _run(tmp_path, cfg, "--fe", "cg", "--degree", "2", "--refinements", "1",
                         name=f"c{i}.csv")
        assert code == EXIT_OK
        meta, rows = read_table(out)
        for r in rows:
            r.pop("wall_seconds")
        tables.append((_without_out(meta["config"]), rows))
    assert tables[0] == tables[1]
