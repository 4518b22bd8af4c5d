"""Energy-optimal bucket path planning over the FEE power surrogate."""

from feeplan.planner.audit import AuditResult, BaselinePath, baseline_paths, energy_audit, path_states
from feeplan.planner.model import (
    INPUT_NAMES,
    STATE_NAMES,
    BucketState,
    ControlInput,
    OcpConfig,
    dynamics_jacobian,
    dynamics_rhs,
    power_demand,
    rk4_step,
    simulate,
)
from feeplan.planner.ocp import Nlp, PlanSolution, build_nlp, initial_guess, solve_ocp

__all__ = [
    "INPUT_NAMES",
    "STATE_NAMES",
    "AuditResult",
    "BaselinePath",
    "BucketState",
    "ControlInput",
    "Nlp",
    "OcpConfig",
    "PlanSolution",
    "baseline_paths",
    "build_nlp",
    "dynamics_jacobian",
    "dynamics_rhs",
    "energy_audit",
    "initial_guess",
    "path_states",
    "power_demand",
    "rk4_step",
    "simulate",
    "solve_ocp",
]
