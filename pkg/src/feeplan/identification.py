"""Three-stage soil parameter identification from a dig trace.

Stage 1 fits the tangential force with the wedge force reconstructed from the
observed normal force (``F = F_N / cos(delta)``), which decouples
``(C_a, delta, k_c, k_phi, n)``. Stage 2 fits ``(C, gamma, phi)`` to that
reconstructed wedge force. Stage 3 refines the Bekker parameters
``(k_c, k_phi, n)`` against the tangential force of the full model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from feeplan import fee
from feeplan.errors import ConvergenceError, InvalidInputError, NoInformationError
from feeplan.fee import G, PARAM_NAMES, SoilParams, ToolGeometry
from feeplan.nls import bounded_nls_solve
from feeplan.sensitivity import RomStrategy
from feeplan.traces import DEFAULT_BOUNDS, DigTrace, PileProfile, depth_along

STAGE_PARAMS = {
    1: ("C_a", "delta", "k_c", "k_phi", "n"),
    2: ("C", "gamma", "phi"),
    3: ("k_c", "k_phi", "n"),
}

_IDX = {k: i for i, k in enumerate(PARAM_NAMES)}


@dataclass(frozen=True)
class StageSpec:
    stage: int
    free_params: tuple
    fixed_params: dict
    bounds: dict

    def __post_init__(self):
        if self.stage not in STAGE_PARAMS:
            raise InvalidInputError(f"stage must be 1, 2 or 3, got {self.stage}")
        extra = set(self.free_params) - set(STAGE_PARAMS[self.stage])
        if extra:
            raise InvalidInputError(f"stage {self.stage} cannot free {sorted(extra)}")
        clash = set(self.free_params) & set(self.fixed_params)
        if clash:
            raise InvalidInputError(f"parameters both free and fixed: {sorted(clash)}")

    @classmethod
    def for_stage(cls, stage: int, rom: RomStrategy | None = None, bounds: dict | None = None):
        fixed = dict(rom.fixed) if rom else {}
        free = tuple(k for k in STAGE_PARAMS[stage] if k not in fixed)
        return cls(stage=stage, free_params=free, fixed_params=fixed, bounds=dict(bounds or DEFAULT_BOUNDS))


@dataclass
class StageReport:
    stage: int
    free_params: tuple
    x: dict
    converged: bool
    iterations: int
    cost_history: list
    message: str


@dataclass
class FitResult:
    theta_hat: SoilParams
    rmse_FT: float
    rmse_FN: float
    iterations: int
    objective_history: list
    wall_time: float
    start_index: int = 0
    converged: bool = True
    stages: list = field(default_factory=list)
    theta0: SoilParams | None = None

    @property
    def score(self) -> float:
        return self.rmse_FT**2 + self.rmse_FN**2

    def to_json(self) -> dict:
        return {
            "theta_hat": self.theta_hat.as_dict(),
            "theta0": self.theta0.as_dict() if self.theta0 else None,
            "rmse_FT_N": self.rmse_FT,
            "rmse_FN_N": self.rmse_FN,
            "iterations": self.iterations,
            "objective_history": self.objective_history,
            "wall_time_s": self.wall_time,
            "start_index": self.start_index,
            "converged": self.converged,
            "stages": [
                {
                    "stage": s.stage,
                    "free_params": list(s.free_params),
                    "x": s.x,
                    "converged": s.converged,
                    "iterations": s.iterations,
                    "message": s.message,
                }
                for s in self.stages
            ],
        }


class TraceModel:
    """Pose-derived quantities of a trace, precomputed once per identification."""

    def __init__(self, trace: DigTrace, tool: ToolGeometry, pile: PileProfile):
        if len(trace) == 0:
            raise NoInformationError("trace is empty")
        self.trace = trace
        self.tool = tool
        self.pile = pile
        x, z = trace.x_b, trace.z_b
        self.d = depth_along(pile, x, z)
        if not np.any(self.d > 0):
            raise NoInformationError("no sample of the trace is engaged with the soil (all d = 0)")
        self.rho = fee.attack_angle(trace.Phi, tool.blade_offset)
        self.alpha = pile.slope_at(x)
        self.L_t = self.d / np.sin(self.rho)
        dA = np.maximum(0.0, np.diff(x)) * 0.5 * (self.d[1:] + self.d[:-1])
        # swept area; payload = gamma * w * area
        self.area = np.concatenate([[0.0], np.cumsum(dA)])
        self._beta_key = None
        self._beta = None

    def W_load(self, gamma):
        return np.where(self.d > 0, gamma * self.tool.w * self.area * G, 0.0)

    def bekker(self, k_c, k_phi, n):
        return self.tool.w * self.tool.b * fee.pressure(k_c, k_phi, n, self.tool.b, self.d)

    def beta(self, phi, delta):
        # finite-difference columns for C and gamma reuse the same angles
        key = (float(phi), float(delta))
        if key != self._beta_key:
            self._beta = fee.optimal_failure_angle(self.alpha, phi, self.rho, delta)
            self._beta_key = key
        return self._beta

    def _forces(self, theta):
        beta = self.beta(theta[3], theta[4])
        return fee.forces_array(theta, self.tool, self.d, self.rho, self.alpha, self.W_load(theta[0]), beta=beta)

    def wedge(self, theta):
        return self._forces(theta)[2]

    def forces(self, theta):
        F_T, F_N, _ = self._forces(theta)
        return F_T, F_N

    def rmse(self, theta):
        F_T, F_N = self.forces(theta)
        return (
            float(np.sqrt(np.mean((self.trace.F_T - F_T) ** 2))),
            float(np.sqrt(np.mean((self.trace.F_N - F_N) ** 2))),
        )


def _solve_stage(model: TraceModel, spec: StageSpec, theta: np.ndarray, residual, tol, max_iter):
    theta = theta.copy()
    for k, v in spec.fixed_params.items():
        theta[_IDX[k]] = v
    idx = [_IDX[k] for k in spec.free_params]
    if not idx:
        return theta, StageReport(spec.stage, (), {}, True, 0, [0.5 * float(residual(theta) @ residual(theta))], "nothing to fit")
    lo = np.array([spec.bounds[k][0] for k in spec.free_params])
    hi = np.array([spec.bounds[k][1] for k in spec.free_params])
    x0 = np.clip(theta[idx], lo, hi)

    def fn(x):
        th = theta.copy()
        th[idx] = x
        return residual(th)

    x, diag = bounded_nls_solve(fn, x0, (lo, hi), tol=tol, max_iter=max_iter)
    theta[idx] = x
    report = StageReport(
        stage=spec.stage,
        free_params=spec.free_params,
        x={k: float(v) for k, v in zip(spec.free_params, x)},
        converged=diag.converged,
        iterations=diag.iterations,
        cost_history=diag.cost_history,
        message=diag.message,
    )
    return theta, report


def _as_theta(theta) -> np.ndarray:
    return theta.to_array() if isinstance(theta, SoilParams) else np.asarray(theta, dtype=float).copy()


def stage1_residual(model: TraceModel):
    obs = model.trace

    def residual(theta):
        C_a, delta, k_c, k_phi, n = theta[[2, 4, 5, 6, 7]]
        pred = model.bekker(k_c, k_phi, n) + obs.F_N * np.tan(delta) + C_a * model.tool.w * model.L_t
        return obs.F_T - pred

    return residual


def stage2_residual(model: TraceModel, delta_star: float):
    target = model.trace.F_N / np.cos(delta_star)

    def residual(theta):
        th = theta.copy()
        th[4] = delta_star
        return target - model.wedge(th)

    return residual


def stage3_residual(model: TraceModel):
    def residual(theta):
        F_T, _ = model.forces(theta)
        return model.trace.F_T - F_T

    return residual


def stage1_fit(trace: DigTrace, spec: StageSpec, tool: ToolGeometry, pile: PileProfile, theta0,
               tol: float = 1e-10, max_iter: int = 500, model: TraceModel | None = None):
    """Fit the tangential-force parameters with the wedge force taken from observed F_N.

    Returns ``(theta, FitResult)`` where ``theta`` is the running full parameter vector.
    """
    if spec.stage != 1:
        raise InvalidInputError("stage1_fit needs a stage-1 spec")
    return _fit(1, trace, spec, tool, pile, theta0, tol, max_iter, model)


def stage2_fit(trace: DigTrace, spec: StageSpec, stage1_out, tool: ToolGeometry, pile: PileProfile,
               tol: float = 1e-10, max_iter: int = 500, model: TraceModel | None = None):
    """Fit ``(C, gamma, phi)`` to the wedge force reconstructed with the stage-1 delta."""
    if spec.stage != 2:
        raise InvalidInputError("stage2_fit needs a stage-2 spec")
    return _fit(2, trace, spec, tool, pile, stage1_out, tol, max_iter, model)


def stage3_fit(trace: DigTrace, spec: StageSpec, stage12_out, tool: ToolGeometry, pile: PileProfile,
               tol: float = 1e-10, max_iter: int = 500, model: TraceModel | None = None):
    """Refine the Bekker parameters against the full-model tangential force."""
    if spec.stage != 3:
        raise InvalidInputError("stage3_fit needs a stage-3 spec")
    return _fit(3, trace, spec, tool, pile, stage12_out, tol, max_iter, model)


def _fit(stage, trace, spec, tool, pile, theta_in, tol, max_iter, model):
    t0 = time.perf_counter()
    model = model or TraceModel(trace, tool, pile)
    theta = _as_theta(theta_in)
    if stage == 1:
        residual = stage1_residual(model)
    elif stage == 2:
        residual = stage2_residual(model, theta[4])
    else:
        residual = stage3_residual(model)
    theta, report = _solve_stage(model, spec, theta, residual, tol, max_iter)
    rmse_FT, rmse_FN = model.rmse(theta)
    result = FitResult(
        theta_hat=SoilParams.from_array(theta),
        rmse_FT=rmse_FT,
        rmse_FN=rmse_FN,
        iterations=report.iterations,
        objective_history=list(report.cost_history),
        wall_time=time.perf_counter() - t0,
        converged=report.converged,
        stages=[report],
        theta0=SoilParams.from_array(_as_theta(theta_in)),
    )
    return theta, result


def identify(trace: DigTrace, tool: ToolGeometry, pile: PileProfile, theta0, rom: RomStrategy | None = None,
             bounds: dict | None = None, tol: float = 1e-10, max_iter: int = 500, start_index: int = 0) -> FitResult:
    """Run stages 1 -> 2 -> 3 from ``theta0``."""
    t0 = time.perf_counter()
    model = TraceModel(trace, tool, pile)
    theta = _as_theta(theta0)
    for k, v in (rom.fixed if rom else {}).items():
        theta[_IDX[k]] = v
    start = SoilParams.from_array(theta)
    stages, history, iterations = [], [], 0
    for stage, fit in ((1, stage1_fit), (2, stage2_fit), (3, stage3_fit)):
        spec = StageSpec.for_stage(stage, rom, bounds)
        if stage == 1:
            theta, res = fit(trace, spec, tool, pile, theta, tol=tol, max_iter=max_iter, model=model)
        else:
            theta, res = fit(trace, spec, theta, tool, pile, tol=tol, max_iter=max_iter, model=model)
        stages.extend(res.stages)
        history.extend(res.objective_history)
        iterations += res.iterations
    rmse_FT, rmse_FN = model.rmse(theta)
    return FitResult(
        theta_hat=SoilParams.from_array(theta),
        rmse_FT=rmse_FT,
        rmse_FN=rmse_FN,
        iterations=iterations,
        objective_history=history,
        wall_time=time.perf_counter() - t0,
        start_index=start_index,
        converged=all(s.converged for s in stages),
        stages=stages,
        theta0=start,
    )


@dataclass
class PipelineResult:
    best: FitResult
    starts: list

    def summary(self) -> dict:
        times = [r.wall_time for r in self.starts]
        return {
            "best_start": self.best.start_index,
            "median_wall_time_s": float(np.median(times)),
            "median_rmse_FT_N": float(np.median([r.rmse_FT for r in self.starts])),
            "median_rmse_FN_N": float(np.median([r.rmse_FN for r in self.starts])),
            "converged_starts": sum(r.converged for r in self.starts),
        }


def initial_guesses(starts: int, seed, bounds: dict | None = None, init="random") -> list:
    """Starting parameter vectors: box midpoint, a given vector, or seeded uniform draws."""
    bounds = bounds or DEFAULT_BOUNDS
    lo = np.array([bounds[k][0] for k in PARAM_NAMES])
    hi = np.array([bounds[k][1] for k in PARAM_NAMES])
    if isinstance(init, SoilParams) or not isinstance(init, str):
        return [_as_theta(init)] * starts
    if init == "midpoint":
        return [0.5 * (lo + hi)] * starts
    if init != "random":
        raise InvalidInputError(f"unknown init {init!r}")
    rng = np.random.default_rng(seed)
    return [lo + rng.random(len(lo)) * (hi - lo) for _ in range(starts)]


def run_pipeline(trace: DigTrace, rom: RomStrategy | None = None, starts: int = 12, seed=0, *,
                 tool: ToolGeometry | None = None, pile: PileProfile | None = None,
                 bounds: dict | None = None, init="random", tol: float = 1e-10,
                 max_iter: int = 500) -> PipelineResult:
    """Multi-start three-stage identification.

    Each start runs the full stage sequence; the start with the smallest
    ``rmse_FT**2 + rmse_FN**2`` wins. Tool and pile default to the trace's
    metadata sidecar, then to the package defaults.

    Raises
    ------
    ConvergenceError
        If no start converges in every stage.
    """
    if starts < 1:
        raise InvalidInputError("starts must be >= 1")
    tool = tool or _tool_from_meta(trace.meta)
    pile = pile or _pile_from_meta(trace.meta)
    results = []
    for i, theta0 in enumerate(initial_guesses(starts, seed, bounds, init)):
        results.append(identify(trace, tool, pile, theta0, rom=rom, bounds=bounds, tol=tol,
                                max_iter=max_iter, start_index=i))
    ok = [r for r in results if r.converged]
    if not ok:
        raise ConvergenceError(
            f"none of {starts} starts converged",
            diagnostics=[[(s.stage, s.message, s.iterations) for s in r.stages] for r in results],
        )
    best = min(ok, key=lambda r: (r.score, r.start_index))
    return PipelineResult(best=best, starts=results)


def _tool_from_meta(meta: dict) -> ToolGeometry:
    from feeplan.traces import TOOL_KEYS

    t = meta.get("tool") or {}
    defaults = ToolGeometry()
    return ToolGeometry(**{k: float(t.get(v, getattr(defaults, k))) for k, v in TOOL_KEYS.items()})


def _pile_from_meta(meta: dict) -> PileProfile:
    if meta.get("pile"):
        return PileProfile.from_json(meta["pile"])
    if meta.get("alpha_rad") is not None:
        return PileProfile.linear(meta["alpha_rad"])
    return PileProfile()
