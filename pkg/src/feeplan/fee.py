"""Fundamental Earthmoving Equation (FEE) soil-tool interaction model.

The blade sees a tangential force

    F_T = w b P + F sin(delta) + C_a w L_t
    F_N = F cos(delta)

where P is the Bekker penetration pressure and F the force needed to fail
the soil wedge ahead of the blade,

    F = d^2 w gamma g N_gamma + C w d N_c + C_a w d N_a + W_load N_q.

Every array-level function broadcasts with numpy so that the same code path
serves single poses, whole dig traces and Sobol sample matrices.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from feeplan.errors import FlatObjectiveError, InvalidInputError, SingularGeometryError

G = 9.81

PARAM_NAMES = ("gamma", "C", "C_a", "phi", "delta", "k_c", "k_phi", "n")

#: distance kept from the ends of the failure-angle search interval (rad)
BETA_MARGIN = 1e-3
#: golden-section tolerance on beta (rad)
BETA_TOL = 1e-6

_SINGULAR_EPS = 1e-12
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_GRID_POINTS = 65


@dataclass(frozen=True)
class SoilParams:
    """Soil parameter vector in SI units, ordered as :data:`PARAM_NAMES`."""

    gamma: float  # kg/m^3
    C: float  # N/m^2
    C_a: float  # N/m^2
    phi: float  # rad
    delta: float  # rad
    k_c: float  # N/m^(n+1)
    k_phi: float  # N/m^(n+2)
    n: float

    def __post_init__(self):
        values = self.to_array()
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(f"soil parameters must be finite, got {self}")
        if self.gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        for name in ("C", "C_a", "k_c", "k_phi"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        for name in ("phi", "delta"):
            if not 0.0 <= getattr(self, name) < math.pi / 2:
                raise InvalidInputError(f"{name} must lie in [0, pi/2)")
        if self.n <= 0:
            raise InvalidInputError("n must be positive")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "SoilParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise InvalidInputError(f"expected {len(PARAM_NAMES)} parameters, got shape {values.shape}")
        return cls(**{k: float(v) for k, v in zip(PARAM_NAMES, values)})

    def replace(self, **changes) -> "SoilParams":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


#: calibrated soil of the reference scenario (k_c, k_phi converted from kN)
REFERENCE_SOIL = SoilParams(
    gamma=1850.0, C=518.0, C_a=53.8, phi=0.075, delta=0.609, k_c=1930.0, k_phi=190.0, n=0.94
)


@dataclass(frozen=True)
class ToolGeometry:
    """Bucket geometry. ``blade_offset`` maps tilt to angle of attack (rho = Phi + offset)."""

    w: float = 1.69
    b: float = 0.03
    r: float = 0.5
    blade_offset: float = 0.35
    F_B: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in dataclasses.astuple(self)):
            raise InvalidInputError("tool geometry must be finite")
        if self.w <= 0 or self.b <= 0 or self.r <= 0:
            raise InvalidInputError("w, b and r must be positive")
        if self.F_B < 0:
            raise InvalidInputError("F_B must be non-negative")

    def replace(self, **changes) -> "ToolGeometry":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Engagement:
    """Blade/soil contact state at one instant."""

    d: float
    L_t: float
    L_f: float
    rho: float
    alpha: float
    beta: float
    W_load: float

    @property
    def engaged(self) -> bool:
        return self.d > 0


@dataclass(frozen=True)
class BearingFactors:
    N_gamma: float
    N_c: float
    N_a: float
    N_q: float


@dataclass(frozen=True)
class BladeForces:
    F_T: float
    F_N: float
    F: float
    F_R: float


def _check_finite(**values):
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise InvalidInputError(f"{name} must be finite")


def _scalar_or_array(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _first_bad(mask):
    idx = np.argwhere(np.asarray(mask))
    return None if idx.size == 0 else tuple(int(i) for i in idx[0])


# ---------------------------------------------------------------------------
# Bekker pressure
# ---------------------------------------------------------------------------

def pressure(k_c, k_phi, n, b, d):
    """Array form of the Bekker load-sinkage law ``(k_c/b + k_phi) d^n``."""
    d = np.asarray(d, dtype=float)
    # d^n is 0 at d = 0 for n > 0; the where() keeps gradients finite there
    dn = np.where(d > 0, np.abs(d) ** n, 0.0)
    return (k_c / b + k_phi) * dn


def bekker_pressure(p: SoilParams, b: float, d: float) -> float:
    """Penetration pressure in front of a blade of thickness ``b`` at depth ``d``.

    Parameters
    ----------
    p : SoilParams
        Soil; only ``k_c``, ``k_phi`` and ``n`` are used.
    b : float
        Cutting-edge thickness (m), positive.
    d : float
        Penetration depth (m), non-negative.

    Returns
    -------
    float
        Pressure in N/m^2.
    """
    _check_finite(b=b, d=d)
    if b <= 0:
        raise InvalidInputError("edge thickness b must be positive")
    if d < 0:
        raise InvalidInputError("depth d must be non-negative")
    return float(pressure(p.k_c, p.k_phi, p.n, b, d))


# ---------------------------------------------------------------------------
# Bearing capacity factors
# ---------------------------------------------------------------------------

def _factor_arrays(alpha, beta, phi, rho, delta, check=True):
    alpha, beta, phi, rho, delta = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, beta, phi, rho, delta))
    )
    s_bp = np.sin(beta + phi)
    s_b = np.sin(beta)
    s_r = np.sin(rho)
    if check:
        for mask, what in (
            (np.abs(s_bp) < _SINGULAR_EPS, "beta + phi is a multiple of pi"),
            (np.abs(s_b) < _SINGULAR_EPS, "beta is a multiple of pi"),
            (np.abs(s_r) < _SINGULAR_EPS, "angle of attack rho is a multiple of pi"),
        ):
            if np.any(mask):
                raise SingularGeometryError(f"singular geometry: {what}", _first_bad(mask))
    cot_bp = np.cos(beta + phi) / s_bp
    cot_b = np.cos(beta) / s_b
    cot_r = np.cos(rho) / s_r
    den = np.cos(rho + delta) + np.sin(rho + delta) * cot_bp
    if check:
        mask = np.abs(den) < _SINGULAR_EPS
        if np.any(mask):
            raise SingularGeometryError("singular geometry: vanishing denominator", _first_bad(mask))
    surcharge = np.cos(alpha) + np.sin(alpha) * cot_bp
    n_gamma = (cot_b - np.tan(alpha)) * surcharge / (2.0 * den)
    n_c = (1.0 + cot_b * cot_bp) / den
    n_a = (1.0 - cot_r * cot_bp) / den
    n_q = surcharge / den
    return n_gamma, n_c, n_a, n_q


def bearing_factors(alpha, beta, phi, rho, delta) -> BearingFactors:
    """The four dimensionless bearing capacity factors.

    Accepts scalars or broadcastable arrays; the returned fields follow the
    input shape. Raises :class:`SingularGeometryError` when a cotangent
    argument or the common denominator vanishes.
    """
    _check_finite(alpha=alpha, beta=beta, phi=phi, rho=rho, delta=delta)
    return BearingFactors(*(_scalar_or_array(f) for f in _factor_arrays(alpha, beta, phi, rho, delta)))


class _NGamma:
    """N_gamma and its slope in beta with the beta-independent trig precomputed."""

    def __init__(self, alpha, phi, rho, delta):
        self.phi = phi
        self.tan_a = np.tan(alpha)
        self.cos_a = np.cos(alpha)
        self.sin_a = np.sin(alpha)
        self.cos_rd = np.cos(rho + delta)
        self.sin_rd = np.sin(rho + delta)
        self.a_phi = alpha + phi
        self.rd_phi = rho + delta + phi

    def value(self, beta):
        with np.errstate(divide="ignore", invalid="ignore"):
            cot_bp = 1.0 / np.tan(beta + self.phi)
            return ((1.0 / np.tan(beta) - self.tan_a) * (self.cos_a + self.sin_a * cot_bp)
                    / (2.0 * (self.cos_rd + self.sin_rd * cot_bp)))

    def slope(self, beta):
        # N_gamma = (cot b - tan a) sin(b+phi+a) / (2 sin(b+phi+rho+delta))
        with np.errstate(divide="ignore", invalid="ignore"):
            a = 1.0 / np.tan(beta) - self.tan_a
            s1 = np.sin(beta + self.a_phi)
            s2 = np.sin(beta + self.rd_phi)
            da = -1.0 / np.sin(beta) ** 2
            ds1 = np.cos(beta + self.a_phi)
            ds2 = np.cos(beta + self.rd_phi)
            return (da * s1 * s2 + a * ds1 * s2 - a * s1 * ds2) / (2.0 * s2**2)


def failure_angle_bounds(alpha, phi, rho, delta):
    """Admissible search interval for the failure-wedge angle.

    The upper end keeps ``beta + phi`` below pi/2, keeps the wedge-weight
    factor ``cot(beta) - tan(alpha)`` non-negative, and stays short of the
    pole where the common denominator of the bearing factors changes sign.
    """
    alpha, phi, rho, delta = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, phi, rho, delta))
    )
    hi = np.minimum.reduce([
        np.full(alpha.shape, math.pi / 2) - phi,
        math.pi / 2 - alpha,
        math.pi - phi - rho - delta,
    ]) - BETA_MARGIN
    lo = np.full(alpha.shape, BETA_MARGIN)
    return lo, hi


def optimal_failure_angle(alpha, phi, rho, delta, tol: float = BETA_TOL):
    """Failure-wedge angle minimizing N_gamma over the admissible interval.

    A coarse grid brackets the global minimum, golden-section search narrows
    it to ``tol`` and, for interior minima, a bisection on the analytic slope
    polishes the root so that the result is smooth in the inputs. Minima on
    the interval ends are returned exactly at the end point.

    Works elementwise on broadcastable arrays.

    Raises
    ------
    SingularGeometryError
        If the admissible interval is empty.
    FlatObjectiveError
        If N_gamma is constant on the interval (no distinguished minimum).
    """
    _check_finite(alpha=alpha, phi=phi, rho=rho, delta=delta)
    alpha, phi, rho, delta = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, phi, rho, delta))
    )
    shape = alpha.shape
    alpha, phi, rho, delta = (v.ravel() for v in (alpha, phi, rho, delta))
    lo, hi = failure_angle_bounds(alpha, phi, rho, delta)
    empty = hi <= lo
    if np.any(empty):
        raise SingularGeometryError("no admissible failure angle", _first_bad(empty))
    ng = _NGamma(alpha, phi, rho, delta)
    ng_col = _NGamma(*(v[:, None] for v in (alpha, phi, rho, delta)))

    t = np.linspace(0.0, 1.0, _GRID_POINTS)
    grid = lo[:, None] + (hi - lo)[:, None] * t[None, :]
    vals = ng_col.value(grid)
    scale = np.maximum(1.0, np.nanmax(np.abs(vals), axis=1))
    flat = np.ptp(vals, axis=1) <= 1e-12 * scale
    if np.any(flat):
        i = _first_bad(flat)[0]
        raise FlatObjectiveError(
            f"N_gamma is constant ({vals[i, 0]:.6g}) over beta in [{lo[i]:.4g}, {hi[i]:.4g}] "
            f"for alpha={alpha[i]:.4g}, phi={phi[i]:.4g}, rho={rho[i]:.4g}, delta={delta[i]:.4g}"
        )
    k = np.nanargmin(vals, axis=1)
    rows = np.arange(len(k))
    a = grid[rows, np.maximum(k - 1, 0)]
    b = grid[rows, np.minimum(k + 1, _GRID_POINTS - 1)]

    # golden-section on [a, b]
    h = b - a
    n_iter = max(1, int(math.ceil(math.log(tol / float(h.max())) / math.log(_INV_PHI))))
    c = b - _INV_PHI * h
    e = a + _INV_PHI * h
    fc = ng.value(c)
    fe = ng.value(e)
    for _ in range(n_iter):
        left = fc < fe
        b = np.where(left, e, b)
        a = np.where(left, a, c)
        c_new = np.where(left, b - _INV_PHI * (b - a), e)
        e_new = np.where(left, c, a + _INV_PHI * (b - a))
        fc_new = np.where(left, ng.value(c_new), fe)
        fe_new = np.where(left, fc, ng.value(e_new))
        c, e, fc, fe = c_new, e_new, fc_new, fe_new
    beta = 0.5 * (a + b)

    # polish interior minima on the slope; bracket must straddle a sign change
    width = 10 * tol
    interior = (beta - lo > 2 * width) & (hi - beta > 2 * width)
    left = np.where(interior, beta - width, beta)
    right = np.where(interior, beta + width, beta)
    bracket = interior & (ng.slope(left) < 0) & (ng.slope(right) > 0)
    if np.any(bracket):
        for _ in range(40):
            mid = 0.5 * (left + right)
            up = ng.slope(mid) > 0
            right = np.where(bracket & up, mid, right)
            left = np.where(bracket & ~up, mid, left)
    beta = np.where(bracket, 0.5 * (left + right), beta)

    # snap to an interval end when that end is at least as good
    cand = np.stack([beta, lo, hi], axis=1)
    cvals = ng_col.value(cand)
    cvals = np.where(np.isfinite(cvals), cvals, np.inf)
    best = cand[rows, np.argmin(cvals, axis=1)]
    return _scalar_or_array(best.reshape(shape))


# ---------------------------------------------------------------------------
# Engagement and forces
# ---------------------------------------------------------------------------

RHO_MIN = 1e-3


def attack_angle(Phi, blade_offset):
    """Angle of attack from bucket tilt, clamped to (0, pi/2]."""
    return np.clip(np.asarray(Phi, dtype=float) + blade_offset, RHO_MIN, math.pi / 2)


def engagement_from_pose(tip_x, tip_z, Phi, pile, tool: ToolGeometry, p: SoilParams,
                         payload: float = 0.0, depth_mode: str = "vertical") -> Engagement:
    """Blade/soil contact state for a bucket-tip pose.

    ``depth_mode="vertical"`` measures depth straight down from the pile
    surface; ``"normal"`` measures it perpendicular to the local surface.
    A tip at or above the surface yields the all-zero engagement.
    """
    _check_finite(tip_x=tip_x, tip_z=tip_z, Phi=Phi, payload=payload)
    alpha = float(pile.slope_at(tip_x))
    d = max(0.0, float(pile.height(tip_x)) - tip_z)
    if depth_mode == "normal":
        d *= math.cos(alpha)
    elif depth_mode != "vertical":
        raise InvalidInputError(f"unknown depth_mode {depth_mode!r}")
    rho = float(attack_angle(Phi, tool.blade_offset))
    if d == 0.0:
        return Engagement(d=0.0, L_t=0.0, L_f=0.0, rho=rho, alpha=alpha, beta=0.0, W_load=0.0)
    beta = optimal_failure_angle(alpha, p.phi, rho, p.delta)
    return Engagement(
        d=d,
        L_t=d / math.sin(rho),
        L_f=d / math.sin(beta),
        rho=rho,
        alpha=alpha,
        beta=beta,
        W_load=max(0.0, payload) * G,
    )


def wedge_force(p: SoilParams, tool: ToolGeometry, e: Engagement) -> float:
    """Force ``F`` required to fail the soil wedge (N)."""
    if e.d == 0.0:
        return 0.0
    f = bearing_factors(e.alpha, e.beta, p.phi, e.rho, p.delta)
    return (
        e.d**2 * tool.w * p.gamma * G * f.N_gamma
        + p.C * tool.w * e.d * f.N_c
        + p.C_a * tool.w * e.d * f.N_a
        + e.W_load * f.N_q
    )


def blade_forces(p: SoilParams, tool: ToolGeometry, e: Engagement) -> BladeForces:
    """Tangential, normal, wedge and resultant force on the blade."""
    F = wedge_force(p, tool, e)
    P = bekker_pressure(p, tool.b, e.d)
    F_T = tool.w * tool.b * P + F * math.sin(p.delta) + p.C_a * tool.w * e.L_t
    F_N = F * math.cos(p.delta)
    return BladeForces(F_T=F_T, F_N=F_N, F=F, F_R=math.hypot(F_T, F_N))


def theta_columns(theta):
    """Split a (..., 8) parameter array into its eight named columns."""
    theta = np.asarray(theta, dtype=float)
    return tuple(theta[..., i] for i in range(len(PARAM_NAMES)))


def forces_array(theta, tool: ToolGeometry, d, rho, alpha, W_load, beta=None):
    """Vectorized blade forces.

    ``theta`` is a (..., 8) array in :data:`PARAM_NAMES` order whose leading
    dimensions broadcast against the pose arrays ``d``, ``rho``, ``alpha``,
    ``W_load``. ``beta`` is recomputed from the angles when omitted.
    Disengaged entries (d = 0) carry no wedge, so every force is zero there
    regardless of ``W_load``.

    Returns
    -------
    (F_T, F_N, F) : tuple of ndarray
    """
    gamma, C, C_a, phi, delta, k_c, k_phi, n = theta_columns(theta)
    d = np.asarray(d, dtype=float)
    rho = np.asarray(rho, dtype=float)
    W_load = np.asarray(W_load, dtype=float)
    if beta is None:
        beta = optimal_failure_angle(alpha, phi, rho, delta)
    n_gamma, n_c, n_a, n_q = _factor_arrays(alpha, beta, phi, rho, delta)
    active = d > 0
    F = np.where(
        active,
        d**2 * tool.w * gamma * G * n_gamma + C * tool.w * d * n_c + C_a * tool.w * d * n_a + W_load * n_q,
        0.0,
    )
    L_t = d / np.sin(rho)
    F_T = tool.w * tool.b * pressure(k_c, k_phi, n, tool.b, d) + F * np.sin(delta) + C_a * tool.w * L_t
    F_N = F * np.cos(delta)
    return F_T, F_N, F
