"""Bucket-tip dynamics, excavation power and RK4 integration.

State ``x = [m_p, v_b, omega_b, Phi, x_b, z_b]`` (kg, m/s, rad/s, rad, m, m),
input ``u = [u_l, u_r]`` (m/s^2, rad/s^2). Functions accept a single state
of shape (6,) or a stack of shape (K, 6).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from feeplan import fee
from feeplan.errors import ConfigError
from feeplan.fee import G, SoilParams, ToolGeometry
from feeplan.traces import PileProfile

STATE_NAMES = ("m_p", "v_b", "omega_b", "Phi", "x_b", "z_b")
INPUT_NAMES = ("u_l", "u_r")
NX, NU = 6, 2
M, V, W, PHI, X, Z = range(NX)


@dataclass(frozen=True)
class BucketState:
    m_p: float
    v_b: float
    omega_b: float
    Phi: float
    x_b: float
    z_b: float

    def to_array(self) -> np.ndarray:
        return np.array([self.m_p, self.v_b, self.omega_b, self.Phi, self.x_b, self.z_b], dtype=float)

    @classmethod
    def from_array(cls, a) -> "BucketState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlInput:
    u_l: float
    u_r: float

    def to_array(self) -> np.ndarray:
        return np.array([self.u_l, self.u_r], dtype=float)


def _default_x_lo():
    return (0.0, 0.0, -1.0, 0.0, 0.0, 0.0)


def _default_x_hi():
    return (math.inf, 1.0, 1.0, 0.69, 1.0, 1.0)


@dataclass(frozen=True)
class OcpConfig:
    """Optimal control problem data; defaults reproduce the reference planner scenario."""

    N: int = 50
    dT: float = 0.1
    x_lo: tuple = field(default_factory=_default_x_lo)
    x_hi: tuple = field(default_factory=_default_x_hi)
    u_lo: tuple = (-1.0, -1.0)
    u_hi: tuple = (1.0, 1.0)
    x0: tuple = (0.0, 0.1, 0.0, 0.0, 0.1, 0.1)
    m_min: float = 150.0
    lambda_udot: float = 1e-4
    pile: PileProfile = PileProfile.linear(0.785)
    soil: SoilParams = fee.REFERENCE_SOIL
    tool: ToolGeometry = ToolGeometry()
    Theta: float = 1.099
    #: power normalization (W); None -> peak power of the initial guess
    P_ref: float | None = None
    #: enforce z_b(t_f) = p(x_b(t_f))
    terminal_on_surface: bool = True

    def __post_init__(self):
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if not self.dT > 0:
            raise ConfigError("dT must be positive")
        if self.m_min < 0:
            raise ConfigError("m_min must be non-negative")
        lo, hi, x0 = np.array(self.x_lo), np.array(self.x_hi), np.array(self.x0)
        if lo.shape != (NX,) or hi.shape != (NX,) or x0.shape != (NX,):
            raise ConfigError("state boxes and x0 need six entries")
        if np.any(lo > hi) or np.any(np.array(self.u_lo) > np.array(self.u_hi)):
            raise ConfigError("box lower bounds exceed upper bounds")
        if np.any(x0 < lo - 1e-12) or np.any(x0 > hi + 1e-12):
            bad = [STATE_NAMES[i] for i in np.flatnonzero((x0 < lo - 1e-12) | (x0 > hi + 1e-12))]
            raise ConfigError(f"x0 violates the state box in {bad}")
        if self.P_ref is not None and not self.P_ref > 0:
            raise ConfigError("P_ref must be positive")

    @property
    def t_f(self) -> float:
        return self.N * self.dT

    def replace(self, **changes) -> "OcpConfig":
        import dataclasses

        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        """Plain-JSON form; infinite bounds are written as ``null``."""
        from feeplan.traces import SOIL_KEYS, TOOL_KEYS

        def box(v):
            return [float(a) if math.isfinite(a) else None for a in v]

        return {
            "N": self.N,
            "dT_s": self.dT,
            "x_lo": box(self.x_lo),
            "x_hi": box(self.x_hi),
            "u_lo": box(self.u_lo),
            "u_hi": box(self.u_hi),
            "x0": [float(a) for a in self.x0],
            "m_min_kg": self.m_min,
            "lambda_udot": self.lambda_udot,
            "Theta_rad": self.Theta,
            "P_ref_W": self.P_ref,
            "terminal_on_surface": self.terminal_on_surface,
            "soil": {SOIL_KEYS[k]: getattr(self.soil, k) for k in fee.PARAM_NAMES},
            "tool": {TOOL_KEYS[k]: getattr(self.tool, k) for k in TOOL_KEYS},
            "pile": self.pile.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "OcpConfig":
        """Inverse of :meth:`to_json`. Absent fields take their defaults; unknown fields are refused.

        Raises
        ------
        ConfigError
            On unknown fields or values that fail validation.
        """
        from feeplan.errors import InvalidInputError
        from feeplan.traces import SOIL_KEYS, TOOL_KEYS

        known = {"N", "dT_s", "x_lo", "x_hi", "u_lo", "u_hi", "x0", "m_min_kg", "lambda_udot",
                 "Theta_rad", "P_ref_W", "terminal_on_surface", "soil", "tool", "pile"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown planner field(s) {unknown}")
        d = cls()

        def num(v, name, kind=float):
            try:
                out = kind(v)
            except (TypeError, ValueError):
                raise ConfigError(f"field '{name}' must be a number, got {v!r}") from None
            if kind is float and math.isnan(out):
                raise ConfigError(f"field '{name}' is NaN")
            return out

        def scalar(key, default, kind=float):
            return num(data[key], key, kind) if key in data else default

        def box(key, default, fill):
            if key not in data:
                return tuple(default)
            v = data[key]
            if not isinstance(v, (list, tuple)):
                raise ConfigError(f"field '{key}' must be a list")
            return tuple(fill if a is None else num(a, f"{key}[{i}]") for i, a in enumerate(v))

        def section(key, names, current):
            sec = data.get(key, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"field '{key}' must be an object")
            extra = sorted(set(sec) - set(names.values()))
            if extra:
                raise ConfigError(f"unknown field(s) {extra} in '{key}'")
            return {k: num(sec[v], f"{key}.{v}") if v in sec else getattr(current, k) for k, v in names.items()}

        try:
            from feeplan.traces import PileProfile as _Pile

            return cls(
                N=scalar("N", d.N, int),
                dT=scalar("dT_s", d.dT),
                x_lo=box("x_lo", d.x_lo, -math.inf),
                x_hi=box("x_hi", d.x_hi, math.inf),
                u_lo=box("u_lo", d.u_lo, -math.inf),
                u_hi=box("u_hi", d.u_hi, math.inf),
                x0=box("x0", d.x0, math.nan),
                m_min=scalar("m_min_kg", d.m_min),
                lambda_udot=scalar("lambda_udot", d.lambda_udot),
                Theta=scalar("Theta_rad", d.Theta),
                P_ref=None if data.get("P_ref_W") is None else num(data["P_ref_W"], "P_ref_W"),
                terminal_on_surface=bool(data.get("terminal_on_surface", d.terminal_on_surface)),
                soil=SoilParams(**section("soil", SOIL_KEYS, d.soil)),
                tool=ToolGeometry(**section("tool", TOOL_KEYS, d.tool)),
                pile=_Pile.from_json(data["pile"]) if "pile" in data else d.pile,
            )
        except (InvalidInputError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _relu(a):
    return np.maximum(a, 0.0)


def tip_velocity(x, cfg: OcpConfig):
    """Global tip velocity components ``(xdot, zdot)``."""
    x = np.asarray(x, dtype=float)
    r, th = cfg.tool.r, cfg.Theta
    s = x[..., V] + r * x[..., W] * math.cos(th)
    q = r * x[..., W] * math.sin(th)
    c, sn = np.cos(x[..., PHI]), np.sin(x[..., PHI])
    return s * c - q * sn, s * sn + q * c


def dynamics_rhs(x, u, cfg: OcpConfig):
    """State derivative. Payload grows only while advancing below the surface."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    xd, zd = tip_velocity(x, cfg)
    depth = cfg.pile.height(x[..., X]) - x[..., Z]
    mdot = cfg.soil.gamma * cfg.tool.w * _relu(xd) * _relu(depth)
    return np.stack([mdot, u[..., 0], u[..., 1], x[..., W], xd, zd], axis=-1)


def dynamics_jacobian(x, u, cfg: OcpConfig):
    """Analytic ``(df/dx, df/du)`` with shapes (..., 6, 6) and (..., 6, 2).

    The clamps in the mass rate use the one-sided derivative that is zero
    on the clamped side.
    """
    x = np.asarray(x, dtype=float)
    r, th = cfg.tool.r, cfg.Theta
    xd, zd = tip_velocity(x, cfg)
    Phi = x[..., PHI]
    depth = cfg.pile.height(x[..., X]) - x[..., Z]
    slope = np.tan(cfg.pile.slope_at(x[..., X]))
    gw = cfg.soil.gamma * cfg.tool.w
    adv = (xd > 0).astype(float)
    sub = (depth > 0).astype(float)

    A = np.zeros(x.shape[:-1] + (NX, NX))
    # xdot, zdot
    A[..., X, V] = np.cos(Phi)
    A[..., X, W] = r * np.cos(th + Phi)
    A[..., X, PHI] = -zd
    A[..., Z, V] = np.sin(Phi)
    A[..., Z, W] = r * np.sin(th + Phi)
    A[..., Z, PHI] = xd
    A[..., PHI, W] = 1.0
    # mass rate
    for j in (V, W, PHI):
        A[..., M, j] = gw * adv * _relu(depth) * A[..., X, j]
    A[..., M, X] = gw * _relu(xd) * sub * slope
    A[..., M, Z] = -gw * _relu(xd) * sub
    B = np.zeros(x.shape[:-1] + (NX, NU))
    B[..., V, 0] = 1.0
    B[..., W, 1] = 1.0
    return A, B


def rk4_step(x, u, dT, cfg: OcpConfig, rhs=None):
    """One classical Runge-Kutta step with the input held constant."""
    f = rhs or (lambda xx, uu: dynamics_rhs(xx, uu, cfg))
    x = np.asarray(x, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * dT * k1, u)
    k3 = f(x + 0.5 * dT * k2, u)
    k4 = f(x + dT * k3, u)
    return x + dT / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step_jacobian(x, u, dT, cfg: OcpConfig):
    """Next state and its derivatives ``(x_next, dx_next/dx, dx_next/du)`` by the RK4 chain rule."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    eye = np.broadcast_to(np.eye(NX), x.shape[:-1] + (NX, NX))
    zero_u = np.zeros(x.shape[:-1] + (NX, NU))

    def stage(xs, dxs_dx, dxs_du):
        k = dynamics_rhs(xs, u, cfg)
        A, B = dynamics_jacobian(xs, u, cfg)
        return k, A @ dxs_dx, A @ dxs_du + B

    k1, k1x, k1u = stage(x, eye, zero_u)
    k2, k2x, k2u = stage(x + 0.5 * dT * k1, eye + 0.5 * dT * k1x, 0.5 * dT * k1u)
    k3, k3x, k3u = stage(x + 0.5 * dT * k2, eye + 0.5 * dT * k2x, 0.5 * dT * k2u)
    k4, k4x, k4u = stage(x + dT * k3, eye + dT * k3x, dT * k3u)
    xn = x + dT / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    Jx = eye + dT / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    Ju = dT / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
    return xn, Jx, Ju


def simulate(x0, inputs, dT, cfg: OcpConfig, substeps: int = 1):
    """Roll the RK4 map forward; returns the (len(inputs)+1, 6) state trajectory."""
    xs = [np.asarray(x0, dtype=float)]
    h = dT / substeps
    for u in np.asarray(inputs, dtype=float):
        x = xs[-1]
        for _ in range(substeps):
            x = rk4_step(x, u, h, cfg)
        xs.append(x)
    return np.array(xs)


def blade_forces_at(x, cfg: OcpConfig):
    """FEE tangential and normal force at each state (surcharge = payload weight)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = _relu(cfg.pile.height(x[:, X]) - x[:, Z])
    rho = fee.attack_angle(x[:, PHI], cfg.tool.blade_offset)
    alpha = cfg.pile.slope_at(x[:, X])
    W_load = np.where(d > 0, _relu(x[:, M]) * G, 0.0)
    F_T, F_N, _ = fee.forces_array(cfg.soil.to_array(), cfg.tool, d, rho, alpha, W_load)
    return F_T, F_N


def power_demand(x, cfg: OcpConfig):
    """Required excavation power ``P_r`` (W) at a state or stack of states."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    F_T, F_N = blade_forces_at(xs, cfg)
    r, th, F_B = cfg.tool.r, cfg.Theta, cfg.tool.F_B
    Phi, v, w = xs[:, PHI], xs[:, V], xs[:, W]
    P = (F_T + F_B * np.sin(Phi)) * (v + r * w * math.cos(th)) + (F_N + F_B * np.cos(Phi)) * (r * w * math.sin(th))
    return float(P[0]) if single else P
