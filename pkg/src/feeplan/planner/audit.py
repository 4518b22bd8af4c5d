"""Equal-area baseline paths and the surrogate energy audit.

A geometric tip path fixes the tilt through the kinematics: with the velocity
angle held at Theta, the velocity component normal to the blade can only come
from rotation, so ``dPhi/dl = (-x' sin Phi + z' cos Phi) / (r sin Theta)``
along arc length. Power is then ``F_T`` times the tangential speed plus
``F_N`` times the normal speed, which makes the audited energy a path
integral independent of how the path is timed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from feeplan.errors import InfeasibleBaselineError, InvalidInputError
from feeplan.planner.model import NX, PHI, X, Z, OcpConfig, power_demand, simulate
from feeplan.traces import enclosed_area

FAMILIES = ("bezier", "two_segment_linear", "stepwise")


@dataclass(frozen=True)
class BaselinePath:
    name: str
    family: str
    x: np.ndarray
    z: np.ndarray
    area: float


@dataclass
class AuditResult:
    energy: float  # J
    payload: float  # kg
    energy_per_kg: float  # J/kg; nan when no soil was collected
    flagged: bool  # True when energy_per_kg is undefined
    t: np.ndarray = field(repr=False, default=None)
    states: np.ndarray = field(repr=False, default=None)
    power: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {
            "energy_J": self.energy,
            "payload_kg": self.payload,
            "energy_per_kg_J": None if self.flagged else self.energy_per_kg,
            "flagged": self.flagged,
        }


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def _bezier(P, samples):
    s = np.linspace(0.0, 1.0, samples)[:, None]
    P = np.asarray(P, dtype=float)
    pts = ((1 - s) ** 3) * P[0] + 3 * ((1 - s) ** 2) * s * P[1] + 3 * (1 - s) * s**2 * P[2] + s**3 * P[3]
    return pts[:, 0], pts[:, 1]


def _polyline(vertices, samples):
    v = np.asarray(vertices, dtype=float)
    seg = np.hypot(*np.diff(v, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    ell = np.linspace(0.0, cum[-1], samples)
    # keep the corners exactly
    ell = np.unique(np.concatenate([ell, cum]))
    return np.interp(ell, cum, v[:, 0]), np.interp(ell, cum, v[:, 1])


# Bezier members: (name, first-handle fraction, dip as a fraction of the chord, second-handle fraction)
_BEZIER_SHAPES = (
    ("bezier-shallow", 0.35, 0.10, 0.75),
    ("bezier-balanced", 0.30, 0.25, 0.70),
    ("bezier-deep", 0.25, 0.45, 0.60),
)
_TWO_SEGMENT_CORNER = 0.6  # corner position as a fraction of the horizontal reach
_STEPWISE_STEPS = 3


def _shape(family, member, cfg: OcpConfig, reach, samples):
    x0, z0 = float(cfg.x0[X]), float(cfg.x0[Z])
    xe = x0 + reach
    ze = float(cfg.pile.height(xe))
    if family == "bezier":
        _, a, dip, b = member
        P = [(x0, z0), (x0 + a * reach, z0 - dip * reach), (x0 + b * reach, z0 - 0.5 * dip * reach), (xe, ze)]
        return _bezier(P, samples)
    if family == "two_segment_linear":
        return _polyline([(x0, z0), (x0 + _TWO_SEGMENT_CORNER * reach, z0), (xe, ze)], samples)
    if family == "stepwise":
        # advance, then lift; the last lift ends on the surface
        k = _STEPWISE_STEPS
        verts = [(x0, z0)]
        x, z = x0, z0
        dz = (ze - z0) / k
        for _ in range(k):
            x += reach / k
            verts.append((x, z))
            z += dz
            verts.append((x, z))
        verts[-1] = (xe, ze)
        return _polyline(verts, samples)
    raise InvalidInputError(f"unknown baseline family {family!r}")


def _members(family):
    if family == "bezier":
        return [(m[0], m) for m in _BEZIER_SHAPES]
    return [(family.replace("_", "-"), None)]


def baseline_paths(cfg: OcpConfig, area_target: float, samples: int = 2001) -> dict:
    """Equal-area baselines sharing the start state of ``cfg``.

    Each member's shape is fixed and its horizontal reach is solved so that
    the area enclosed with the pile surface equals ``area_target``.

    Returns
    -------
    dict
        Family name -> list of :class:`BaselinePath`.

    Raises
    ------
    InfeasibleBaselineError
        If a member cannot enclose the target area inside the state box.
    """
    if not area_target > 0:
        raise InvalidInputError("area target must be positive")
    x0 = float(cfg.x0[X])
    x_max = float(cfg.x_hi[X])
    z_lo, z_hi = float(cfg.x_lo[Z]), float(cfg.x_hi[Z])
    out = {}
    for family in FAMILIES:
        paths = []
        for name, member in _members(family):
            def area_of(reach):
                x, z = _shape(family, member, cfg, reach, samples)
                return enclosed_area(cfg.pile, x, z)

            def fits(reach):
                x, z = _shape(family, member, cfg, reach, samples)
                return x.max() <= x_max + 1e-12 and z.min() >= z_lo - 1e-12 and z.max() <= z_hi + 1e-12

            grid = np.linspace(1e-3, x_max - x0, 200)
            ok = [r for r in grid if fits(r)]
            vals = [area_of(r) - area_target for r in ok]
            hit = next((i for i in range(1, len(vals)) if vals[i - 1] < 0 <= vals[i]), None)
            if hit is None:
                raise InfeasibleBaselineError(
                    f"{name}: area {area_target:.4g} m^2 is unreachable inside the workspace")
            reach = brentq(lambda r: area_of(r) - area_target, ok[hit - 1], ok[hit], xtol=1e-14, rtol=1e-14)
            x, z = _shape(family, member, cfg, reach, samples)
            paths.append(BaselinePath(name=name, family=family, x=x, z=z, area=enclosed_area(cfg.pile, x, z)))
        out[family] = paths
    return out


# ---------------------------------------------------------------------------
# Kinematic inversion and audit
# ---------------------------------------------------------------------------

def _tilt_along(x, z, Phi0, cfg: OcpConfig, substeps: int = 4):
    """Integrate the tilt ODE along a sampled path (tangent held per segment)."""
    c = cfg.tool.r * math.sin(cfg.Theta)
    dx, dz = np.diff(x), np.diff(z)
    Phi = np.empty(len(x))
    Phi[0] = Phi0
    for i in range(len(dx)):
        p = Phi[i]
        h = 1.0 / substeps
        for _ in range(substeps):
            def f(q):
                return (-dx[i] * math.sin(q) + dz[i] * math.cos(q)) / c
            k1 = f(p)
            k2 = f(p + 0.5 * h * k1)
            k3 = f(p + 0.5 * h * k2)
            k4 = f(p + h * k3)
            p += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Phi[i + 1] = p
    return Phi


def path_states(x, z, cfg: OcpConfig):
    """Full state trajectory that traces ``(x, z)`` from the start state of ``cfg``.

    The path is timed at the largest constant tip speed that keeps
    ``|v_b|`` and ``|omega_b|`` inside their boxes. ``v_b`` may be negative on
    steep lifts; the audit does not depend on the timing.
    """
    x, z = np.asarray(x, dtype=float), np.asarray(z, dtype=float)
    if len(x) < 2:
        raise InvalidInputError("path needs at least two samples")
    Phi = _tilt_along(x, z, float(cfg.x0[PHI]), cfg)
    seg = np.hypot(np.diff(x), np.diff(z))
    keep = np.concatenate([[True], seg > 0])
    x, z, Phi = x[keep], z[keep], Phi[keep]
    seg = seg[seg > 0]
    ell = np.concatenate([[0.0], np.cumsum(seg)])
    # per unit tip speed: rates at segment midpoints, then mapped to nodes
    tx, tz = np.diff(x) / seg, np.diff(z) / seg
    Pm = 0.5 * (Phi[1:] + Phi[:-1])
    r, th = cfg.tool.r, cfg.Theta
    w_unit = (-tx * np.sin(Pm) + tz * np.cos(Pm)) / (r * math.sin(th))
    v_unit = tx * np.cos(Pm) + tz * np.sin(Pm) - r * w_unit * math.cos(th)
    v_cap = max(abs(cfg.x_lo[1]), abs(cfg.x_hi[1]))
    w_cap = max(abs(cfg.x_lo[2]), abs(cfg.x_hi[2]))
    speed = min(v_cap / max(np.max(np.abs(v_unit)), 1e-12), w_cap / max(np.max(np.abs(w_unit)), 1e-12))
    t = ell / speed

    def to_nodes(a):
        return np.concatenate([[a[0]], 0.5 * (a[1:] + a[:-1]), [a[-1]]])

    states = np.zeros((len(x), NX))
    states[:, 1] = to_nodes(v_unit * speed)
    states[:, 2] = to_nodes(w_unit * speed)
    states[:, PHI] = Phi
    states[:, X] = x
    states[:, Z] = z
    gw = cfg.soil.gamma * cfg.tool.w
    d = np.maximum(cfg.pile.height(x) - z, 0.0)
    dm = gw * np.maximum(np.diff(x), 0.0) * 0.5 * (d[1:] + d[:-1])
    states[:, 0] = float(cfg.x0[0]) + np.concatenate([[0.0], np.cumsum(dm)])
    return t, states


def _audit_states(t, states, cfg):
    P = power_demand(states, cfg)
    energy = float(np.trapezoid(P, t))
    payload = float(states[-1, 0] - states[0, 0])
    flagged = not payload > 0
    return AuditResult(
        energy=energy,
        payload=payload,
        energy_per_kg=math.nan if flagged else energy / payload,
        flagged=flagged,
        t=t,
        states=states,
        power=P,
    )


def energy_audit(obj, cfg: OcpConfig, substeps: int = 20) -> AuditResult:
    """Energy, collected payload and energy per kilogram under the FEE surrogate.

    ``obj`` is a :class:`BaselinePath`, an ``(x, z)`` pair of arrays, or a
    :class:`~feeplan.planner.ocp.PlanSolution`. Plans are re-integrated from
    their inputs with ``substeps`` RK4 steps per interval; power is
    integrated with the trapezoid rule in both cases.
    """
    if hasattr(obj, "inputs") and hasattr(obj, "states"):
        states = simulate(obj.states[0], np.repeat(obj.inputs, substeps, axis=0), cfg.dT / substeps, cfg)
        t = np.arange(len(states)) * (cfg.dT / substeps)
        return _audit_states(t, states, cfg)
    if isinstance(obj, BaselinePath):
        x, z = obj.x, obj.z
    else:
        x, z = obj
    t, states = path_states(x, z, cfg)
    return _audit_states(t, states, cfg)
