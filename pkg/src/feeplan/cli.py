"""Command-line entry point: ``feeplan {simulate,identify,sobol,plan,compare}``.

Every command writes a JSON result, CSV plot data and ``manifest.json`` into
``--out``. Result files carry no timings, so a rerun with the same config and
seed reproduces them byte for byte; wall times live only in the manifest.

Exit codes: 0 success, 2 configuration or input error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from feeplan.errors import ConfigError, ConvergenceError, FeeError, InfeasibleBaselineError
from feeplan.fee import PARAM_NAMES, SoilParams
from feeplan.traces import (
    SOIL_KEYS,
    ScenarioConfig,
    _atomic_write,
    enclosed_area,
    load_trace,
    reference_paths,
    save_trace,
    synth_trace,
)

log = logging.getLogger("feeplan")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 2, 3


class _NonConverged(Exception):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# Deterministic output helpers
# ---------------------------------------------------------------------------

def _plain(obj):
    """Recursively convert to JSON-safe builtins; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _json_text(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args):
        self.command = command
        self.args = args
        self.out = Path(args.out)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.t0 = time.perf_counter()
        self.wall: dict = {}

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = _sha256(path)

    def write_json(self, name, obj) -> Path:
        return self._write(name, _json_text(obj))

    def write_csv(self, name, header, rows) -> Path:
        return self._write(name, _csv_text(header, rows))

    def _write(self, name, text) -> Path:
        path = self.out / name
        _atomic_write(path, text)
        self.outputs[str(path)] = hashlib.sha256(text.encode()).hexdigest()
        log.info("wrote %s", path)
        return path

    def record(self, path):
        self.outputs[str(path)] = _sha256(path)

    def manifest(self, config_text: str, seed):
        def version(pkg):
            try:
                return metadata.version(pkg)
            except metadata.PackageNotFoundError:
                return None

        self.wall["total_s"] = time.perf_counter() - self.t0
        data = {
            "command": self.command,
            "config": None if self.args.config is None else str(self.args.config),
            "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
            "seed": seed,
            "inputs": self.inputs,
            "outputs": dict(self.outputs),
            "versions": {
                "feeplan": version("feeplan"),
                "numpy": np.__version__,
                "scipy": version("scipy"),
                "python": platform.python_version(),
            },
            "wall_times": self.wall,
        }
        path = self.out / "manifest.json"
        _atomic_write(path, _json_text(data))
        return path


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _scenario(args) -> tuple:
    """Scenario config and the canonical text hashed into the manifest."""
    if args.config is None:
        cfg = ScenarioConfig()
    else:
        cfg = ScenarioConfig.load(args.config)
    return cfg, json.dumps(_plain(cfg.to_json()), sort_keys=True)


def _planner(args):
    from feeplan.planner import OcpConfig

    data = {} if args.config is None else _read_json(args.config)
    if not isinstance(data, dict):
        raise ConfigError("planner config must be a JSON object")
    cfg = OcpConfig.from_json(data)
    if getattr(args, "soil", None):
        fit = _read_json(args.soil)
        theta = fit.get("theta_hat", fit)
        try:
            cfg = cfg.replace(soil=SoilParams(**{k: float(theta[k]) for k in PARAM_NAMES}))
        except KeyError as exc:
            raise ConfigError(f"{args.soil}: missing soil parameter {exc.args[0]!r}") from exc
    return cfg, json.dumps(_plain(cfg.to_json()), sort_keys=True)


def _seed(args, default):
    return default if args.seed is None else args.seed


def _bounds_file(path) -> dict:
    data = _read_json(path)
    bounds = {}
    for key, value in data.items():
        names = [p for p, k in SOIL_KEYS.items() if key in (p, k)]
        if not names:
            raise ConfigError(f"unknown bound field {key!r}")
        if not (isinstance(value, (list, tuple)) and len(value) == 2):
            raise ConfigError(f"bound {key!r} must be a [min, max] pair")
        bounds[names[0]] = (float(value[0]), float(value[1]))
    return bounds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    run = Run("simulate", args)
    cfg, cfg_text = _scenario(args)
    seed = _seed(args, cfg.rng_seed)
    if args.noise_rel is not None:
        cfg = _replace_scenario(cfg, noise_rel=args.noise_rel)
    cfg = _replace_scenario(cfg, rng_seed=seed)
    if args.path_file:
        run.add_input(args.path_file)
        poses = _read_poses(args.path_file)
        label = Path(args.path_file).stem
    else:
        paths = {p.name: p for p in reference_paths(cfg.pile)}
        if args.path not in paths:
            raise ConfigError(f"unknown reference path {args.path!r}; choose from {sorted(paths)}")
        poses, label = paths[args.path].poses, args.path
    trace = synth_trace(cfg, poses, args.dt)
    trace.meta["path"] = label
    path = save_trace(trace, run.out / "trace.csv")
    run.record(path)
    run.record(path.with_name("trace.meta.json"))
    run.add_input(args.config)
    run.manifest(cfg_text, seed)
    return EXIT_OK


def _replace_scenario(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    import dataclasses

    return dataclasses.replace(cfg, **changes)


def _read_poses(path) -> np.ndarray:
    from feeplan.errors import TraceFormatError

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["x_b", "z_b", "Phi"]:
        raise TraceFormatError(f"{path}: path file needs the header x_b,z_b,Phi")
    try:
        return np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise TraceFormatError(f"{path}: {exc}") from exc


def cmd_identify(args) -> int:
    from feeplan.identification import TraceModel, _pile_from_meta, _tool_from_meta, run_pipeline
    from feeplan.sensitivity import make_rom

    run = Run("identify", args)
    cfg, cfg_text = _scenario(args)
    seed = _seed(args, 0)
    trace = load_trace(args.trace)
    run.add_input(args.trace)
    run.add_input(args.config)
    bounds = dict(cfg.bounds)
    if args.bounds:
        run.add_input(args.bounds)
        bounds.update(_bounds_file(args.bounds))
    fix = [s.strip() for s in (args.rom or "").split(",") if s.strip() and s.strip() != "full"]
    rom = make_rom(fix) if fix else None
    tool, pile = _tool_from_meta(trace.meta), _pile_from_meta(trace.meta)
    t0 = time.perf_counter()
    try:
        res = run_pipeline(trace, rom, args.starts, seed, tool=tool, pile=pile, bounds=bounds, init=args.init)
    except ConvergenceError as exc:
        raise _NonConverged(str(exc), exc.diagnostics) from exc
    run.wall["identify_s"] = time.perf_counter() - t0
    best = res.best.to_json()
    best.pop("wall_time_s", None)
    summary = res.summary()
    summary.pop("median_wall_time_s", None)
    peak_T, peak_N = float(np.max(np.abs(trace.F_T))), float(np.max(np.abs(trace.F_N)))
    peak_R = float(np.max(np.hypot(trace.F_T, trace.F_N)))
    result = {
        "rom": rom.label if rom else "full",
        "fixed": rom.fixed if rom else {},
        "seed": seed,
        "starts": args.starts,
        "init": args.init,
        "best": best,
        "summary": summary,
        "per_start": [
            {"start_index": r.start_index, "rmse_FT_N": r.rmse_FT, "rmse_FN_N": r.rmse_FN, "converged": r.converged}
            for r in res.starts
        ],
        "rmse_FT_rel_peak": res.best.rmse_FT / peak_T if peak_T > 0 else None,
        "rmse_FN_rel_peak": res.best.rmse_FN / peak_N if peak_N > 0 else None,
        "peak_F_R_N": peak_R,
        "rmse_FT_rel_peak_F_R": res.best.rmse_FT / peak_R if peak_R > 0 else None,
        "rmse_FN_rel_peak_F_R": res.best.rmse_FN / peak_R if peak_R > 0 else None,
        "theta_hat": res.best.theta_hat.as_dict(),
    }
    run.write_json("fit.json", result)
    F_T, F_N = TraceModel(trace, tool, pile).forces(res.best.theta_hat.to_array())
    run.write_csv(
        "forces.csv",
        ("t", "F_T_obs", "F_T_pred", "F_N_obs", "F_N_pred"),
        zip(trace.t, trace.F_T, F_T, trace.F_N, F_N),
    )
    run.manifest(cfg_text, seed)
    return EXIT_OK


def cmd_sobol(args) -> int:
    from feeplan.sensitivity import ParamBox, identification_context, rank_for_fr

    run = Run("sobol", args)
    cfg, cfg_text = _scenario(args)
    run.add_input(args.config)
    seed = _seed(args, 0)
    box = ParamBox({k: tuple(cfg.bounds[k]) for k in PARAM_NAMES})
    t0 = time.perf_counter()
    res = rank_for_fr(box, identification_context(cfg=cfg), base_n=args.base_n, seed=seed)
    run.wall["sobol_s"] = time.perf_counter() - t0
    run.write_json("sobol.json", {**res.to_json(), "seed": seed})
    run.write_csv(
        "sobol.csv",
        ("parameter", "S_T", "ci"),
        ((k, res.S_T[k], res.confidence[k]) for k in res.ranking),
    )
    run.manifest(cfg_text, seed)
    return EXIT_OK


def _plan_payload(sol, cfg) -> dict:
    out = sol.to_json()
    out.pop("solve_time_s", None)
    out["config"] = cfg.to_json()
    out["enclosed_area_m2"] = enclosed_area(cfg.pile, sol.states[:, 4], sol.states[:, 5])
    out["t"] = sol.t
    out["states"] = sol.states
    out["inputs"] = sol.inputs
    out["power_W"] = sol.power
    return out


def cmd_plan(args) -> int:
    from feeplan.planner import STATE_NAMES, solve_ocp

    run = Run("plan", args)
    cfg, cfg_text = _planner(args)
    run.add_input(args.config)
    run.add_input(getattr(args, "soil", None))
    seed = _seed(args, 0)
    sol = solve_ocp(cfg, max_iter=args.max_iter, method=args.method)
    run.wall["solve_s"] = sol.solve_time
    run.write_json("plan.json", _plan_payload(sol, cfg))
    run.write_csv("trajectory.csv", ("t", "x_b", "z_b", "Phi"),
                  zip(sol.t, sol.states[:, 4], sol.states[:, 5], sol.states[:, 3]))
    header, rows = sol.rows()
    run.write_csv("states.csv", header, rows)
    run.write_csv("power.csv", ("t", "P_r"), zip(sol.t[:-1], sol.power))
    run.manifest(cfg_text, seed)
    if not sol.converged:
        raise _NonConverged(
            f"planner did not converge: {sol.message}",
            {"iterations": sol.iterations, "feasibility": sol.feasibility, "kkt_residual": sol.kkt_residual,
             "state_names": list(STATE_NAMES)},
        )
    return EXIT_OK


class _LoadedPlan:
    def __init__(self, data):
        try:
            self.states = np.asarray(data["states"], dtype=float)
            self.inputs = np.asarray(data["inputs"], dtype=float)
        except KeyError as exc:
            raise ConfigError(f"plan file lacks field {exc.args[0]!r}") from exc


def cmd_compare(args) -> int:
    from feeplan.planner import baseline_paths, energy_audit, solve_ocp

    run = Run("compare", args)
    cfg, cfg_text = _planner(args)
    run.add_input(args.config)
    run.add_input(getattr(args, "soil", None))
    seed = _seed(args, 0)
    if args.plan:
        run.add_input(args.plan)
        data = _read_json(args.plan)
        plan = _LoadedPlan(data)
        if "config" in data and args.config is None:
            from feeplan.planner import OcpConfig

            cfg = OcpConfig.from_json(data["config"])
            cfg_text = json.dumps(_plain(cfg.to_json()), sort_keys=True)
    else:
        sol = solve_ocp(cfg, max_iter=args.max_iter)
        run.wall["solve_s"] = sol.solve_time
        if not sol.converged:
            raise _NonConverged(f"planner did not converge: {sol.message}",
                                {"feasibility": sol.feasibility, "kkt_residual": sol.kkt_residual})
        plan = sol
    audit = energy_audit(plan, cfg)
    area = enclosed_area(cfg.pile, plan.states[:, 4], plan.states[:, 5])
    rows = [("plan", "optimal", audit.energy, audit.payload, audit.energy_per_kg)]
    try:
        families = baseline_paths(cfg, area)
    except InfeasibleBaselineError as exc:
        raise ConfigError(str(exc)) from exc
    for family, paths in families.items():
        for p in paths:
            a = energy_audit(p, cfg)
            rows.append((family, p.name, a.energy, a.payload, a.energy_per_kg))
    plan_epk = audit.energy_per_kg
    base = [r[4] for r in rows[1:] if math.isfinite(r[4])]
    best = min(base) if base else math.nan
    table = [(*r, 1.0 - plan_epk / r[4] if r[0] != "plan" and math.isfinite(r[4]) else math.nan) for r in rows]
    header = ("family", "name", "energy_J", "payload_kg", "energy_per_kg_J", "plan_saving")
    run.write_csv("compare.csv", header, table)
    run.write_json("compare.json", {
        "enclosed_area_m2": area,
        "plan_energy_per_kg_J": plan_epk,
        "best_baseline_energy_per_kg_J": best,
        "saving_vs_best_baseline": 1.0 - plan_epk / best if math.isfinite(best) else None,
        "rows": [dict(zip(header, r)) for r in table],
    })
    run.manifest(cfg_text, seed)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(parser, defaults: bool):
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", type=Path, default=d(None), help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=d(None), help="random seed (default: from config, else 0)")
    parser.add_argument("--out", type=Path, default=d(Path("out")), help="output directory (default: out)")
    parser.add_argument("--verbose", "-v", action="store_true", default=d(False), help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feeplan", description="FEE soil identification and energy-optimal bucket planning.")
    _global_flags(parser, defaults=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common], help="synthesize a dig trace from a scenario config")
    p.add_argument("--path", default="smooth-deep", help="reference path name (default: smooth-deep)")
    p.add_argument("--path-file", type=Path, help="CSV of poses with header x_b,z_b,Phi (overrides --path)")
    p.add_argument("--dt", type=float, default=0.01, help="sample spacing in s (default: 0.01)")
    p.add_argument("--noise-rel", type=float, help="noise std as a fraction of the peak resultant force")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("identify", parents=[common], help="fit soil parameters to a dig trace")
    p.add_argument("--trace", type=Path, required=True, help="trace CSV")
    p.add_argument("--rom", default="", help="comma-separated parameters to fix, e.g. phi,gamma (default: none)")
    p.add_argument("--starts", type=int, default=12, help="number of starts (default: 12)")
    p.add_argument("--init", choices=("random", "midpoint"), default="random", help="start selection (default: random)")
    p.add_argument("--bounds", type=Path, help="JSON file of [min, max] bounds overriding the config")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("sobol", parents=[common], help="total-order Sobol indices of the resultant force")
    p.add_argument("--base-n", type=int, default=2**13, help="Saltelli base sample size (default: 8192)")
    p.set_defaults(func=cmd_sobol)

    for name, func, text in (("plan", cmd_plan, "solve the energy-optimal scooping problem"),
                             ("compare", cmd_compare, "energy-per-kg table of the plan against baselines")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--soil", type=Path, help="fit.json (or a theta_hat object) supplying the soil parameters")
        p.add_argument("--max-iter", type=int, default=200, help="solver iteration limit (default: 200)")
        if name == "plan":
            p.add_argument("--method", choices=("ipm", "slsqp"), default="ipm", help="NLP solver (default: ipm)")
        else:
            p.add_argument("--plan", type=Path, help="plan.json to audit instead of solving")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _NonConverged as exc:
        print(f"feeplan {args.command}: {exc}", file=sys.stderr)
        if exc.diagnostics is not None:
            print(json.dumps(_plain(exc.diagnostics), sort_keys=True), file=sys.stderr)
        return EXIT_NONCONVERGED
    except ConvergenceError as exc:
        print(f"feeplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (FeeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"feeplan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
