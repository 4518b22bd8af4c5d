"""Dig traces, pile profiles, scenario configuration and the synthetic trace generator.

File formats
------------
Trace CSV: header ``t,x_b,z_b,Phi,F_T,F_N``, SI units, ``.`` decimal point,
LF line endings. ``F_T_kN``/``F_N_kN`` and ``Phi_deg`` columns are accepted
on input and converted. Metadata lives in a JSON sidecar next to the CSV
(``trace.csv`` -> ``trace.meta.json``).

Scenario JSON: field names carry their unit, e.g. ``k_c_N_per_m_n1``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from feeplan import fee
from feeplan.errors import ConfigError, InvalidInputError, SingularGeometryError, TraceFormatError
from feeplan.fee import G, PARAM_NAMES, SoilParams, ToolGeometry

COLUMNS = ("t", "x_b", "z_b", "Phi", "F_T", "F_N")

# column name -> (canonical column, factor to SI)
_COLUMN_ALIASES = {
    "t": ("t", 1.0),
    "x_b": ("x_b", 1.0),
    "z_b": ("z_b", 1.0),
    "Phi": ("Phi", 1.0),
    "Phi_deg": ("Phi", math.pi / 180.0),
    "F_T": ("F_T", 1.0),
    "F_T_kN": ("F_T", 1000.0),
    "F_N": ("F_N", 1.0),
    "F_N_kN": ("F_N", 1000.0),
}

SOIL_KEYS = {
    "gamma": "gamma_kg_per_m3",
    "C": "C_N_per_m2",
    "C_a": "C_a_N_per_m2",
    "phi": "phi_rad",
    "delta": "delta_rad",
    "k_c": "k_c_N_per_m_n1",
    "k_phi": "k_phi_N_per_m_n2",
    "n": "n",
}
TOOL_KEYS = {"w": "w_m", "b": "b_m", "r": "r_m", "blade_offset": "blade_offset_rad", "F_B": "F_B_N"}

#: default hard bounds on the soil parameters (SI)
DEFAULT_BOUNDS = {
    "gamma": (1200.0, 2500.0),
    "C": (0.0, 2500.0),
    "C_a": (0.0, 2500.0),
    "phi": (0.0, 0.785),
    "delta": (0.0, 0.785),
    "k_c": (0.0, 5.0e6),
    "k_phi": (0.0, 5.0e6),
    "n": (0.1, 1.5),
}


# ---------------------------------------------------------------------------
# Pile profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PileProfile:
    """Stockpile surface ``z = p(x)``.

    ``linear`` piles pass through the origin with slope ``alpha``;
    ``piecewise-linear`` piles interpolate ``vertices`` and extend the end
    segments linearly beyond them.
    """

    kind: str = "linear"
    alpha: float = 0.785
    vertices: tuple = ()

    def __post_init__(self):
        if self.kind == "linear":
            if not (math.isfinite(self.alpha) and -math.pi / 2 < self.alpha < math.pi / 2):
                raise ConfigError("linear pile slope alpha must lie in (-pi/2, pi/2)")
        elif self.kind == "piecewise-linear":
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
                raise ConfigError("piecewise-linear pile needs at least two (x, z) vertices")
            if not np.all(np.isfinite(v)) or np.any(np.diff(v[:, 0]) <= 0):
                raise ConfigError("pile vertex x-coordinates must be finite and strictly increasing")
            object.__setattr__(self, "vertices", tuple(map(tuple, v.tolist())))
        else:
            raise ConfigError(f"unknown pile kind {self.kind!r}")

    @classmethod
    def linear(cls, alpha: float) -> "PileProfile":
        return cls(kind="linear", alpha=float(alpha))

    @classmethod
    def piecewise(cls, vertices) -> "PileProfile":
        return cls(kind="piecewise-linear", alpha=float("nan"), vertices=tuple(map(tuple, vertices)))

    def _segments(self, x):
        v = np.asarray(self.vertices, dtype=float)
        i = np.clip(np.searchsorted(v[:, 0], x, side="right") - 1, 0, len(v) - 2)
        return v, i

    def height(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            out = x * math.tan(self.alpha)
        else:
            v, i = self._segments(x)
            slope = (v[i + 1, 1] - v[i, 1]) / (v[i + 1, 0] - v[i, 0])
            out = v[i, 1] + slope * (x - v[i, 0])
        return float(out) if out.ndim == 0 else out

    def slope_at(self, x):
        """Local surface inclination (rad)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            out = np.full(x.shape, self.alpha)
        else:
            v, i = self._segments(x)
            out = np.arctan((v[i + 1, 1] - v[i, 1]) / (v[i + 1, 0] - v[i, 0]))
        return float(out) if out.ndim == 0 else out

    def to_json(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear", "alpha_rad": self.alpha}
        return {"kind": self.kind, "vertices_m": [list(p) for p in self.vertices]}

    @classmethod
    def from_json(cls, data: dict) -> "PileProfile":
        kind = data.get("kind", "linear")
        if kind == "linear":
            if "alpha_rad" not in data:
                raise ConfigError("missing field 'pile.alpha_rad'")
            return cls.linear(data["alpha_rad"])
        if "vertices_m" not in data:
            raise ConfigError("missing field 'pile.vertices_m'")
        return cls.piecewise(data["vertices_m"])


# ---------------------------------------------------------------------------
# Dig trace
# ---------------------------------------------------------------------------

@dataclass
class DigTrace:
    """Time series of bucket-tip pose with observed blade-frame forces (SI)."""

    t: np.ndarray
    x_b: np.ndarray
    z_b: np.ndarray
    Phi: np.ndarray
    F_T: np.ndarray
    F_N: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.t)
        for name in COLUMNS:
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise InvalidInputError(f"column {name} has shape {arr.shape}, expected ({n},)")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"column {name} contains non-finite values")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            k = int(np.argmax(np.diff(self.t) <= 0)) + 1
            raise InvalidInputError(f"time must be strictly increasing (sample {k})")
        if np.any(self.F_N < 0):
            raise InvalidInputError("observed normal force must be non-negative")

    def __len__(self):
        return len(self.t)

    def rows(self):
        return np.column_stack([getattr(self, c) for c in COLUMNS])


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_trace(trace: DigTrace, path) -> Path:
    """Write ``trace`` as CSV (shortest round-trip float repr) plus its JSON sidecar."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in trace.rows():
        writer.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())
    _atomic_write(sidecar_path(path), json.dumps(trace.meta, indent=2, sort_keys=True) + "\n")
    return path


def load_trace(path) -> DigTrace:
    """Read and validate a trace CSV; the sidecar is optional.

    Raises
    ------
    TraceFormatError
        On a missing column, unparsable cell, non-finite value, negative
        normal force or non-increasing time. Line numbers count the header
        as line 1.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError("empty trace file", line=1) from None
        header = [h.strip() for h in header]
        mapping = {}
        for j, name in enumerate(header):
            if name not in _COLUMN_ALIASES:
                raise TraceFormatError(f"unknown column {name!r}", line=1, column=name)
            canon, factor = _COLUMN_ALIASES[name]
            if canon in mapping:
                raise TraceFormatError(f"duplicate column for {canon!r}", line=1, column=name)
            mapping[canon] = (j, factor, name)
        for canon in COLUMNS:
            if canon not in mapping:
                raise TraceFormatError(f"missing column {canon!r}", line=1, column=canon)
        data = {c: [] for c in COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise TraceFormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            for canon in COLUMNS:
                j, factor, name = mapping[canon]
                try:
                    value = float(row[j])
                except ValueError:
                    raise TraceFormatError(f"cannot parse {row[j]!r}", line=lineno, column=name) from None
                if not math.isfinite(value):
                    raise TraceFormatError("non-finite value", line=lineno, column=name)
                data[canon].append(value * factor if factor != 1.0 else value)
            if data["F_N"][-1] < 0:
                raise TraceFormatError("negative normal force", line=lineno, column=mapping["F_N"][2])
            if len(data["t"]) > 1 and data["t"][-1] <= data["t"][-2]:
                raise TraceFormatError("time is not strictly increasing", line=lineno, column=mapping["t"][2])
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return DigTrace(**{c: np.array(data[c], dtype=float) for c in COLUMNS}, meta=meta)


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

def _box_array(bounds: dict) -> np.ndarray:
    return np.array([bounds[k] for k in PARAM_NAMES], dtype=float)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to synthesize and identify one dig scenario."""

    soil: SoilParams = fee.REFERENCE_SOIL
    tool: ToolGeometry = ToolGeometry()
    pile: PileProfile = PileProfile()
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    noise_std: float = 0.0
    rng_seed: int = 0
    #: when set, overrides ``noise_std`` with this fraction of the peak resultant force
    noise_rel: float | None = None

    def __post_init__(self):
        for k in PARAM_NAMES:
            if k not in self.bounds:
                raise ConfigError(f"missing field 'bounds.{SOIL_KEYS[k]}'")
            lo, hi = self.bounds[k]
            if not lo < hi:
                raise ConfigError(f"bounds for {k} must satisfy min < max, got ({lo}, {hi})")
        if self.noise_std < 0 or (self.noise_rel is not None and self.noise_rel < 0):
            raise ConfigError("noise level must be non-negative")

    @property
    def box(self) -> np.ndarray:
        """(8, 2) array of parameter bounds in :data:`PARAM_NAMES` order."""
        return _box_array(self.bounds)

    def to_json(self) -> dict:
        return {
            "soil": {SOIL_KEYS[k]: getattr(self.soil, k) for k in PARAM_NAMES},
            "tool": {TOOL_KEYS[k]: getattr(self.tool, k) for k in TOOL_KEYS},
            "pile": self.pile.to_json(),
            "bounds": {SOIL_KEYS[k]: list(self.bounds[k]) for k in PARAM_NAMES},
            "noise_std_N": self.noise_std,
            "noise_rel": self.noise_rel,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioConfig":
        def need(section, key, where):
            if key not in section:
                raise ConfigError(f"missing field '{where}.{key}'")
            return section[key]

        try:
            soil_d = need(data, "soil", "config")
            soil = SoilParams(**{k: float(need(soil_d, SOIL_KEYS[k], "soil")) for k in PARAM_NAMES})
            tool_d = data.get("tool", {})
            defaults = ToolGeometry()
            tool = ToolGeometry(**{k: float(tool_d.get(v, getattr(defaults, k))) for k, v in TOOL_KEYS.items()})
            pile = PileProfile.from_json(need(data, "pile", "config"))
            bounds = dict(DEFAULT_BOUNDS)
            for k, v in data.get("bounds", {}).items():
                names = [p for p, key in SOIL_KEYS.items() if key == v or key == k]
                if not names:
                    raise ConfigError(f"unknown bound field 'bounds.{k}'")
                bounds[names[0]] = (float(v[0]), float(v[1]))
            return cls(
                soil=soil,
                tool=tool,
                pile=pile,
                bounds=bounds,
                noise_std=float(data.get("noise_std_N", 0.0)),
                rng_seed=int(data.get("rng_seed", 0)),
                noise_rel=None if data.get("noise_rel") is None else float(data["noise_rel"]),
            )
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(data)


# ---------------------------------------------------------------------------
# Forward model along a path
# ---------------------------------------------------------------------------

def depth_along(pile: PileProfile, x, z):
    return np.maximum(0.0, pile.height(x) - np.asarray(z, dtype=float))


def payload_along(pile: PileProfile, soil: SoilParams, tool: ToolGeometry, x, z):
    """Accumulated payload (kg) along a sampled path.

    Trapezoidal integration of the clamped mass-rate law
    ``dm = gamma w max(0, dx) max(0, p(x) - z)``.
    """
    x = np.asarray(x, dtype=float)
    d = depth_along(pile, x, z)
    dA = np.maximum(0.0, np.diff(x)) * 0.5 * (d[1:] + d[:-1])
    return soil.gamma * tool.w * np.concatenate([[0.0], np.cumsum(dA)])


def forward_forces(soil: SoilParams, tool: ToolGeometry, pile: PileProfile, x, z, Phi, payload):
    """Noise-free blade forces along a path; returns ``(F_T, F_N, F)``."""
    x = np.asarray(x, dtype=float)
    d = depth_along(pile, x, z)
    rho = fee.attack_angle(Phi, tool.blade_offset)
    alpha = pile.slope_at(x)
    W = np.where(d > 0, np.asarray(payload, dtype=float) * G, 0.0)
    return fee.forces_array(soil.to_array(), tool, d, rho, alpha, W)


def synth_trace(cfg: ScenarioConfig, path, dt: float, t0: float = 0.0) -> DigTrace:
    """Synthetic dig trace from the FEE forward model.

    Parameters
    ----------
    cfg : ScenarioConfig
        Soil, tool, pile and noise settings. Noise is iid Gaussian on both
        force channels, drawn from ``numpy.random.default_rng(cfg.rng_seed)``.
    path : array_like, shape (N, 3)
        Bucket-tip poses ``(x_b, z_b, Phi)``.
    dt : float
        Sample spacing (s).

    Notes
    -----
    Noisy normal forces are clipped at zero; the blade cannot pull on the soil.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[1] != 3 or len(path) < 1:
        raise InvalidInputError("path must be an (N, 3) array of (x_b, z_b, Phi) poses")
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    x, z, Phi = path.T
    m = payload_along(cfg.pile, cfg.soil, cfg.tool, x, z)
    try:
        F_T, F_N, _ = forward_forces(cfg.soil, cfg.tool, cfg.pile, x, z, Phi, m)
    except SingularGeometryError as exc:
        idx = exc.index[0] if isinstance(exc.index, tuple) else exc.index
        raise SingularGeometryError(str(exc).split(" (pose")[0], idx) from exc
    std = cfg.noise_std
    if cfg.noise_rel is not None:
        std = cfg.noise_rel * float(np.max(np.hypot(F_T, F_N)))
    if std > 0:
        rng = np.random.default_rng(cfg.rng_seed)
        F_T = F_T + rng.normal(0.0, std, size=F_T.shape)
        F_N = np.maximum(0.0, F_N + rng.normal(0.0, std, size=F_N.shape))
    t = t0 + dt * np.arange(len(x))
    meta = {
        "soil_label": "synthetic",
        "alpha_rad": cfg.pile.alpha if cfg.pile.kind == "linear" else None,
        "pile": cfg.pile.to_json(),
        "tool": {TOOL_KEYS[k]: getattr(cfg.tool, k) for k in TOOL_KEYS},
        "noise_std_N": std,
        "rng_seed": cfg.rng_seed,
        "payload_kg": float(m[-1]),
    }
    return DigTrace(t=t, x_b=x, z_b=z, Phi=Phi, F_T=F_T, F_N=F_N, meta=meta)


# ---------------------------------------------------------------------------
# Reference paths
# ---------------------------------------------------------------------------

SUPPORTED_SLOPES_DEG = (35.0, 45.0)


def enclosed_area(pile: PileProfile, x, z) -> float:
    """Area between the pile surface and a sampled tip path (m^2).

    Integrates ``max(0, p(x) - z)`` over forward motion with the trapezoid rule
    on the path samples; exact for a polyline path under a linear pile segment
    whenever the depth does not change sign within a segment.
    """
    x = np.asarray(x, dtype=float)
    d = depth_along(pile, x, z)
    return float(np.sum(np.maximum(0.0, np.diff(x)) * 0.5 * (d[1:] + d[:-1])))


def _depth_shapes():
    # (name, kind, exit distance along x [m], max depth [m], profile s -> depth fraction)
    def bump(k):
        return lambda s: np.sin(np.pi * s) ** k

    def skewed(peak):
        return lambda s: np.where(s < peak, np.sin(0.5 * np.pi * s / peak), np.cos(0.5 * np.pi * (s - peak) / (1 - peak)))

    def knots(*pts):
        u, v = np.array(pts, dtype=float).T
        return lambda s: np.interp(s, u, v)

    return [
        ("smooth-deep", "smooth", 0.80, 0.22, bump(1)),
        ("smooth-shallow", "smooth", 0.90, 0.12, bump(1)),
        ("smooth-narrow", "smooth", 0.60, 0.18, bump(2)),
        ("smooth-early-peak", "smooth", 0.75, 0.20, skewed(0.35)),
        ("smooth-late-peak", "smooth", 0.75, 0.20, skewed(0.65)),
        ("linear-triangle", "piecewise-linear", 0.70, 0.20, knots((0, 0), (0.5, 1), (1, 0))),
        ("linear-trapezoid", "piecewise-linear", 0.85, 0.15, knots((0, 0), (0.25, 1), (0.75, 1), (1, 0))),
        ("linear-dive", "piecewise-linear", 0.80, 0.20, knots((0, 0), (0.15, 1), (0.4, 1), (1, 0))),
        ("linear-stepped", "piecewise-linear", 0.85, 0.18, knots((0, 0), (0.08, 0.5), (0.33, 0.5), (0.41, 0.8), (0.62, 0.8), (0.7, 1), (0.85, 1), (1, 0))),
    ]


@dataclass(frozen=True)
class ReferencePath:
    name: str
    kind: str
    poses: np.ndarray  # (N, 3) x_b, z_b, Phi
    depth_fn: object = field(repr=False, default=None)
    x_exit: float = 0.0

    def depth(self, x):
        """Analytic penetration depth below the surface at abscissa ``x``."""
        return self.depth_fn(np.asarray(x, dtype=float) / self.x_exit)


def reference_paths(pile: PileProfile, samples: int = 600, Phi_end: float = 0.35) -> list:
    """Nine bucket-tip paths entering at the pile toe and exiting on the surface.

    Five smooth and four piecewise-linear depth profiles; tilt rises
    linearly from 0 to ``Phi_end``. Only linear piles at 35 or 45 degrees
    are supported.
    """
    if pile.kind != "linear":
        raise ConfigError("reference paths need a linear pile")
    deg = math.degrees(pile.alpha)
    if not any(abs(deg - s) < 0.1 for s in SUPPORTED_SLOPES_DEG):
        raise ConfigError(f"unsupported pile slope {deg:.2f} deg; expected one of {SUPPORTED_SLOPES_DEG}")
    # shallower piles get longer, shallower digs
    stretch = 1.0 if deg > 40 else 1.15
    out = []
    for name, kind, x_exit, depth, shape in _depth_shapes():
        x_exit *= stretch
        s = np.linspace(0.0, 1.0, samples)
        x = s * x_exit
        dfn = (lambda sh, dep: (lambda u: dep * sh(np.asarray(u, dtype=float))))(shape, depth)
        d = dfn(s)
        d[0] = d[-1] = 0.0
        z = pile.height(x) - d
        Phi = Phi_end * s
        out.append(ReferencePath(name=name, kind=kind, poses=np.column_stack([x, z, Phi]), depth_fn=dfn, x_exit=x_exit))
    return out
