"""Variance-based global sensitivity of the resultant blade force.

Saltelli's radial design on a scrambled Sobol' sequence with the Jansen
total-order estimator; confidence half-widths come from a row bootstrap.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from feeplan import fee
from feeplan.errors import ContractViolationError, FeeError, InvalidInputError
from feeplan.fee import G, PARAM_NAMES

#: parameters that the ranking leaves as candidates for fixing
LOW_INFLUENCE = ("phi", "delta", "gamma", "C", "C_a")
DOMINANT = ("n", "k_c", "k_phi")

#: subsets left out of the ROM enumeration (31 non-empty subsets -> 28)
EXCLUDED_ROMS = (
    frozenset(LOW_INFLUENCE),
    frozenset({"phi", "delta", "gamma", "C"}),
    frozenset({"delta", "gamma", "C", "C_a"}),
)


class ZeroVarianceError(FeeError):
    """The model output does not vary over the sample; indices are undefined."""


@dataclass(frozen=True)
class ParamBox:
    """Per-parameter (min, max) sampling ranges, SI units."""

    bounds: dict

    def __post_init__(self):
        for k, (lo, hi) in self.bounds.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidInputError(f"invalid range for {k}: ({lo}, {hi})")

    @property
    def names(self) -> tuple:
        return tuple(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([v[0] for v in self.bounds.values()], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([v[1] for v in self.bounds.values()], dtype=float)

    def midpoint(self) -> dict:
        return {k: 0.5 * (lo + hi) for k, (lo, hi) in self.bounds.items()}

    def contains(self, name, value) -> bool:
        lo, hi = self.bounds[name]
        return lo <= value <= hi


def default_box() -> ParamBox:
    from feeplan.traces import DEFAULT_BOUNDS

    return ParamBox(dict(DEFAULT_BOUNDS))


@dataclass
class SaltelliDesign:
    names: tuple
    A: np.ndarray
    B: np.ndarray
    AB: np.ndarray  # (k, N, dim): A with column i taken from B
    active: tuple  # indices of non-degenerate parameters

    @property
    def base_n(self) -> int:
        return self.A.shape[0]

    @property
    def evaluation_count(self) -> int:
        return (len(self.active) + 2) * self.base_n

    def stacked(self) -> np.ndarray:
        """All points in evaluation order: A, B, then each AB_i."""
        return np.concatenate([self.A, self.B, *self.AB], axis=0)


@dataclass
class SobolResult:
    S_T: dict
    confidence: dict
    sample_count: int
    base_n: int
    ranking: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "S_T": self.S_T,
            "confidence": self.confidence,
            "sample_count": self.sample_count,
            "base_n": self.base_n,
            "ranking": self.ranking,
        }


def saltelli_sample(box: ParamBox, base_n: int, seed) -> SaltelliDesign:
    """Saltelli radial design over ``box``.

    Draws ``base_n`` points of a scrambled Sobol' sequence in twice the
    dimension, splits them into A and B, and forms one A_B^(i) matrix per
    non-degenerate parameter. Degenerate ranges (min == max) are held fixed
    and excluded from the radial matrices.
    """
    if base_n < 64 or base_n & (base_n - 1):
        raise InvalidInputError("base_n must be a power of two >= 64")
    lo, hi = box.lower, box.upper
    dim = len(lo)
    active = tuple(i for i in range(dim) if hi[i] > lo[i])
    for i in range(dim):
        if i not in active:
            warnings.warn(f"degenerate range for {box.names[i]}; treating it as fixed", stacklevel=2)
    k = len(active)
    engine = qmc.Sobol(d=2 * max(k, 1), scramble=True, seed=seed)
    u = engine.random_base2(int(math.log2(base_n)))
    A = np.tile(lo, (base_n, 1))
    B = np.tile(lo, (base_n, 1))
    span = (hi - lo)[list(active)]
    A[:, active] = lo[list(active)] + u[:, :k] * span
    B[:, active] = lo[list(active)] + u[:, k:2 * k] * span
    AB = np.empty((k, base_n, dim))
    for j, i in enumerate(active):
        AB[j] = A
        AB[j][:, i] = B[:, i]
    return SaltelliDesign(names=box.names, A=A, B=B, AB=AB, active=active)


def _jansen(fA, fB, fAB):
    var = np.var(np.concatenate([fA, fB], axis=-1), axis=-1)
    return 0.5 * np.mean((fA[..., None, :] - fAB) ** 2, axis=-1) / var[..., None], var


def total_order_indices(design: SaltelliDesign, values, n_boot: int = 200, seed=0) -> SobolResult:
    """Jansen total-order indices from evaluations laid out as :meth:`SaltelliDesign.stacked`.

    Raises
    ------
    ZeroVarianceError
        If the output is constant over A and B.
    """
    values = np.asarray(values, dtype=float)
    N = design.base_n
    k = len(design.active)
    if values.shape != ((k + 2) * N,):
        raise InvalidInputError(f"expected {(k + 2) * N} evaluations, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("model evaluations must be finite")
    fA, fB = values[:N], values[N:2 * N]
    fAB = values[2 * N:].reshape(k, N)
    if np.var(np.concatenate([fA, fB])) <= 1e-300 * max(1.0, float(np.mean(fA**2))):
        raise ZeroVarianceError("model output has zero variance; total-order indices are undefined")
    st, _ = _jansen(fA, fB, fAB)

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, N, size=(n_boot, N))
    boot, _ = _jansen(fA[idx], fB[idx], fAB[:, idx].transpose(1, 0, 2))
    half = 0.5 * (np.quantile(boot, 0.975, axis=0) - np.quantile(boot, 0.025, axis=0))

    S_T = {name: 0.0 for name in design.names}
    ci = {name: 0.0 for name in design.names}
    for j, i in enumerate(design.active):
        S_T[design.names[i]] = float(st[j])
        ci[design.names[i]] = float(half[j])
    ranking = sorted(S_T, key=lambda n: -S_T[n])
    return SobolResult(S_T=S_T, confidence=ci, sample_count=(k + 2) * N, base_n=N, ranking=ranking)


def sobol_indices(fn, box: ParamBox, base_n: int, seed, n_boot: int = 200) -> SobolResult:
    """Sample, evaluate the vectorized ``fn`` (rows -> outputs) and estimate S_T."""
    design = saltelli_sample(box, base_n, seed)
    return total_order_indices(design, fn(design.stacked()), n_boot=n_boot, seed=seed)


# ---------------------------------------------------------------------------
# Resultant force over a representative engagement set
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalContext:
    """Fixed engagement states over which F_R is averaged."""

    d: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    W_load: np.ndarray
    tool: fee.ToolGeometry


def identification_context(n_poses: int = 20, cfg=None) -> EvalContext:
    """Engaged poses sampled evenly along the identification reference path."""
    from feeplan.traces import ScenarioConfig, depth_along, payload_along, reference_paths

    cfg = cfg or ScenarioConfig()
    path = reference_paths(cfg.pile)[0].poses
    x, z, Phi = path.T
    m = payload_along(cfg.pile, cfg.soil, cfg.tool, x, z)
    d = depth_along(cfg.pile, x, z)
    engaged = np.flatnonzero(d > 0)
    pick = engaged[np.linspace(0, len(engaged) - 1, n_poses).round().astype(int)]
    return EvalContext(
        d=d[pick],
        rho=fee.attack_angle(Phi[pick], cfg.tool.blade_offset),
        alpha=cfg.pile.slope_at(x[pick]),
        W_load=m[pick] * G,
        tool=cfg.tool,
    )


def resultant_force(theta, ctx: EvalContext, chunk: int = 8192) -> np.ndarray:
    """Mean over the context poses of F_R for each parameter row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    out = np.empty(len(theta))
    for s in range(0, len(theta), chunk):
        th = theta[s:s + chunk, None, :]
        F_T, F_N, _ = fee.forces_array(th, ctx.tool, ctx.d, ctx.rho, ctx.alpha, ctx.W_load)
        out[s:s + chunk] = np.mean(np.hypot(F_T, F_N), axis=1)
    return out


def rank_for_fr(box: ParamBox | None = None, ctx: EvalContext | None = None,
                base_n: int = 2**13, seed=0, n_boot: int = 200) -> SobolResult:
    """Total-order indices of the pose-averaged resultant force, with ranking."""
    box = box or default_box()
    if tuple(box.names) != PARAM_NAMES:
        box = ParamBox({k: box.bounds[k] for k in PARAM_NAMES})
    ctx = ctx or identification_context()
    if len(ctx.d) == 0:
        raise InvalidInputError("evaluation context must contain at least one pose")
    return sobol_indices(lambda th: resultant_force(th, ctx), box, base_n, seed, n_boot=n_boot)


# ---------------------------------------------------------------------------
# Reduced-order strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RomStrategy:
    """Parameters frozen during identification, and those left free."""

    fixed: dict
    free: tuple

    @property
    def label(self) -> str:
        return "full" if not self.fixed else "+".join(f"{k}*" for k in sorted(self.fixed))


def make_rom(fix_set, box: ParamBox | None = None, nominal: dict | None = None,
             ranking: list | None = None) -> RomStrategy:
    """Freeze ``fix_set`` at box midpoints (or ``nominal`` values).

    Only the five low-influence parameters may be fixed; when a ``ranking``
    is supplied its top three entries are refused as well.
    """
    box = box or default_box()
    fix_set = set(fix_set)
    protected = set(DOMINANT) | set(ranking[:3] if ranking else ())
    bad = sorted(fix_set & protected)
    if bad:
        raise ContractViolationError(f"cannot fix dominant parameter(s) {bad}")
    unknown = sorted(fix_set - set(LOW_INFLUENCE))
    if unknown:
        raise ContractViolationError(f"only {LOW_INFLUENCE} may be fixed, got {unknown}")
    mid = box.midpoint()
    fixed = {}
    for k in sorted(fix_set, key=PARAM_NAMES.index):
        value = float(nominal[k]) if nominal and k in nominal else mid[k]
        if not box.contains(k, value):
            raise ContractViolationError(f"fixed value {value} for {k} lies outside its box")
        fixed[k] = value
    free = tuple(k for k in PARAM_NAMES if k not in fixed)
    return RomStrategy(fixed=fixed, free=free)


def enumerate_roms(box: ParamBox | None = None) -> list:
    """All 28 reduced-order strategies (non-empty low-influence subsets minus :data:`EXCLUDED_ROMS`)."""
    out = []
    for r in range(1, len(LOW_INFLUENCE) + 1):
        for combo in itertools.combinations(LOW_INFLUENCE, r):
            if frozenset(combo) not in EXCLUDED_ROMS:
                out.append(make_rom(combo, box))
    return out
