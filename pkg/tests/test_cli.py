import json
import subprocess
import sys

import pytest

from feeplan.cli import build_parser, main

COMMANDS = {
    "simulate": ["--path", "--path-file", "--dt", "--noise-rel"],
    "identify": ["--trace", "--rom", "--starts", "--init", "--bounds"],
    "sobol": ["--base-n"],
    "plan": ["--soil", "--max-iter", "--method"],
    "compare": ["--soil", "--max-iter", "--plan"],
}
GLOBAL = ["--config", "--seed", "--out", "--verbose"]


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "feeplan.cli", *map(str, args)], capture_output=True, text=True)


def _results(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


@pytest.fixture(scope="module")
def trace_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(out), "--noise-rel", "0.02", "--seed", "3"]) == 0
    return out


# -- help and parsing --------------------------------------------------------------------

def test_top_level_help_lists_commands():
    r = _cli("--help")
    assert r.returncode == 0
    for c in COMMANDS:
        assert c in r.stdout


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_subcommand_help_lists_every_flag(command):
    r = _cli(command, "--help")
    assert r.returncode == 0
    for flag in COMMANDS[command] + GLOBAL:
        assert flag in r.stdout, flag


def test_global_flags_accepted_on_either_side():
    p = build_parser()
    a = p.parse_args(["--seed", "5", "sobol"])
    b = p.parse_args(["sobol", "--seed", "5"])
    assert a.seed == b.seed == 5


# -- commands ------------------------------------------------------------------------------

def test_simulate_writes_trace_and_manifest(trace_dir):
    names = {p.name for p in trace_dir.iterdir()}
    assert {"trace.csv", "trace.meta.json", "manifest.json"} <= names
    man = json.loads((trace_dir / "manifest.json").read_text())
    assert man["command"] == "simulate" and man["seed"] == 3
    assert set(man["versions"]) == {"feeplan", "numpy", "scipy", "python"}
    assert all(len(h) == 64 for h in man["outputs"].values())


def test_identify_outputs(trace_dir, tmp_path):
    out = tmp_path / "fit"
    rc = main(["identify", "--trace", str(trace_dir / "trace.csv"), "--starts", "2", "--rom", "phi,gamma",
               "--out", str(out)])
    assert rc == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["rom"] != "full" and set(fit["fixed"]) == {"phi", "gamma"}
    assert len(fit["per_start"]) == 2
    assert "wall_time_s" not in json.dumps(fit)
    assert (out / "forces.csv").read_text().splitlines()[0] == "t,F_T_obs,F_T_pred,F_N_obs,F_N_pred"


def test_sobol_outputs(tmp_path):
    assert main(["sobol", "--base-n", "64", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sobol.csv").read_text().splitlines()
    assert rows[0] == "parameter,S_T,ci" and len(rows) == 9


def test_same_seed_gives_identical_bytes(trace_dir, tmp_path):
    for name, argv in (
        ("simulate", ["simulate", "--noise-rel", "0.02", "--seed", "3"]),
        ("identify", ["identify", "--trace", str(trace_dir / "trace.csv"), "--starts", "2", "--seed", "1"]),
        ("sobol", ["sobol", "--base-n", "64", "--seed", "2"]),
        ("plan", ["plan", "--config", str(_small_plan_config(tmp_path))]),
    ):
        a, b = tmp_path / f"{name}-a", tmp_path / f"{name}-b"
        assert main([*argv, "--out", str(a)]) == 0
        assert main([*argv, "--out", str(b)]) == 0
        assert _results(a) == _results(b), name
    assert _results(tmp_path / "simulate-a") == _results(trace_dir)


def test_different_seed_changes_trace(trace_dir, tmp_path):
    assert main(["simulate", "--noise-rel", "0.02", "--seed", "4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trace.csv").read_bytes() != (trace_dir / "trace.csv").read_bytes()


def _small_plan_config(tmp_path):
    path = tmp_path / "plan_cfg.json"
    path.write_text(json.dumps({"N": 20, "dT_s": 0.1, "m_min_kg": 40.0}))
    return path


def test_plan_then_compare(tmp_path):
    cfg = _small_plan_config(tmp_path)
    assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    plan = json.loads((tmp_path / "p" / "plan.json").read_text())
    assert plan["converged"] and plan["payload_kg"] >= 40.0 - 1e-6
    assert "solve_time_s" not in plan
    for name in ("trajectory.csv", "states.csv", "power.csv"):
        assert (tmp_path / "p" / name).exists()
    rc = main(["compare", "--plan", str(tmp_path / "p" / "plan.json"), "--out", str(tmp_path / "c")])
    assert rc == 0
    table = (tmp_path / "c" / "compare.csv").read_text().splitlines()
    assert table[0] == "family,name,energy_J,payload_kg,energy_per_kg_J,plan_saving"
    assert table[1].startswith("plan,optimal,")
    assert {r.split(",")[0] for r in table[1:]} == {"plan", "bezier", "two_segment_linear", "stepwise"}


# -- failures ---------------------------------------------------------------------------------

def test_missing_field_exits_2_and_names_it(tmp_path):
    from feeplan.traces import ScenarioConfig

    data = ScenarioConfig().to_json()
    del data["soil"]["gamma_kg_per_m3"]
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(data))
    r = _cli("simulate", "--config", cfg, "--out", tmp_path / "o")
    assert r.returncode == 2
    assert "gamma_kg_per_m3" in r.stderr


def test_bad_planner_value_exits_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"soil": {"gamma_kg_per_m3": "dense"}}))
    r = _cli("plan", "--config", cfg, "--out", tmp_path / "o")
    assert r.returncode == 2 and "soil.gamma_kg_per_m3" in r.stderr


def test_missing_trace_exits_2(tmp_path):
    r = _cli("identify", "--trace", tmp_path / "nope.csv", "--out", tmp_path / "o")
    assert r.returncode == 2 and "nope.csv" in r.stderr


def test_unknown_path_exits_2(tmp_path):
    assert main(["simulate", "--path", "nowhere", "--out", str(tmp_path)]) == 2


def test_non_convergence_exits_3_with_outputs(tmp_path, capsys):
    cfg = _small_plan_config(tmp_path)
    rc = main(["plan", "--config", str(cfg), "--max-iter", "1", "--method", "slsqp", "--out", str(tmp_path / "p")])
    assert rc == 3
    assert "kkt_residual" in capsys.readouterr().err
    assert json.loads((tmp_path / "p" / "plan.json").read_text())["converged"] is False


def test_usage_error_exits_2():
    r = _cli("identify")
    assert r.returncode == 2 and "--trace" in r.stderr


@pytest.mark.slow
def test_full_pipeline_within_five_minutes(tmp_path):
    import time

    t0 = time.perf_counter()
    assert main(["simulate", "--noise-rel", "0.02", "--out", str(tmp_path / "s")]) == 0
    assert main(["identify", "--trace", str(tmp_path / "s" / "trace.csv"), "--out", str(tmp_path / "i")]) == 0
    fit = tmp_path / "i" / "fit.json"
    assert main(["plan", "--soil", str(fit), "--out", str(tmp_path / "p")]) == 0
    assert main(["compare", "--soil", str(fit), "--plan", str(tmp_path / "p" / "plan.json"),
                 "--out", str(tmp_path / "c")]) == 0
    assert time.perf_counter() - t0 < 300.0
    saving = json.loads((tmp_path / "c" / "compare.json").read_text())["saving_vs_best_baseline"]
    assert saving > 0.0
