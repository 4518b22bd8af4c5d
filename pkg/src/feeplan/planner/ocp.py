"""Direct multiple-shooting transcription of the energy-optimal scooping problem.

Decision vector ``z = [X_0, ..., X_N, U_0, ..., U_{N-1}]`` with ``6(N+1) + 2N``
entries. Equalities: the initial state, one RK4 defect per interval and the
terminal on-surface condition. The only general inequality is the payload
floor ``m_p(t_f) >= m_min``, dropped when the start payload already meets it;
state and input boxes are simple bounds.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from feeplan.errors import ConvergenceError
from feeplan.planner.model import (
    INPUT_NAMES,
    NU,
    NX,
    STATE_NAMES,
    M,
    X,
    Z,
    OcpConfig,
    power_demand,
    rk4_step_jacobian,
    simulate,
)
from feeplan.planner.ipm import ipm_solve

#: internal variable scaling: payload in units of 100 kg
_STATE_SCALE = np.array([100.0, 1.0, 1.0, 1.0, 1.0, 1.0])
FD_POWER_STEP = 1e-6
#: lower limit for the default power normalization (W)
P_REF_FLOOR = 1.0
#: initial barrier parameter when restarting from a near-optimal point
WARM_MU0 = 1e-3


@dataclass
class PlanSolution:
    """Optimal (or best found) trajectory and solver diagnostics."""

    t: np.ndarray
    states: np.ndarray  # (N+1, 6)
    inputs: np.ndarray  # (N, 2)
    power: np.ndarray  # (N,) W at the left node of each interval
    energy: float  # J
    payload: float  # kg
    objective: float
    converged: bool
    message: str
    iterations: int
    solve_time: float
    feasibility: float
    kkt_residual: float
    P_ref: float

    @property
    def energy_per_kg(self) -> float:
        return self.energy / self.payload if self.payload > 0 else math.inf

    @property
    def final_state(self) -> dict:
        return dict(zip(STATE_NAMES, map(float, self.states[-1])))

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "message": self.message,
            "iterations": self.iterations,
            "solve_time_s": self.solve_time,
            "objective": self.objective,
            "energy_J": self.energy,
            "payload_kg": self.payload,
            "energy_per_kg_J": self.energy_per_kg,
            "feasibility": self.feasibility,
            "kkt_residual": self.kkt_residual,
            "P_ref_W": self.P_ref,
            "final_state": self.final_state,
        }

    def rows(self):
        """Trajectory rows ``t, states..., inputs..., P_r`` (inputs/power blank at the last node)."""
        header = ("t", *STATE_NAMES, *INPUT_NAMES, "P_r")
        out = []
        for i, t in enumerate(self.t):
            if i < len(self.inputs):
                out.append((t, *self.states[i], *self.inputs[i], self.power[i]))
            else:
                out.append((t, *self.states[i], math.nan, math.nan, math.nan))
        return header, out


@dataclass
class Nlp:
    """Transcribed problem in scaled variables ``y = z / scale``."""

    cfg: OcpConfig
    P_ref: float
    scale: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_eq: int
    sparsity: np.ndarray = field(repr=False)
    #: 1 when the payload floor is imposed, 0 when the start payload already meets it
    n_in: int = 1

    @property
    def n_var(self) -> int:
        return self.scale.size

    # -- layout -----------------------------------------------------------
    def split(self, z):
        N = self.cfg.N
        Xs = z[:NX * (N + 1)].reshape(N + 1, NX)
        Us = z[NX * (N + 1):].reshape(N, NU)
        return Xs, Us

    def pack(self, Xs, Us):
        return np.concatenate([np.ravel(Xs), np.ravel(Us)])

    def to_z(self, y):
        return np.asarray(y, dtype=float) * self.scale

    def to_y(self, z):
        return np.asarray(z, dtype=float) / self.scale

    # -- cost -------------------------------------------------------------
    def _smooth_terms(self, Us):
        dU = np.diff(Us, axis=0) / self.cfg.dT
        return dU

    def power_and_jacobian(self, Xl):
        """Power at each node and its central-difference derivative per state, shape (N, 6)."""
        cfg = self.cfg
        P = power_demand(Xl, cfg)
        dP = np.empty_like(Xl)
        for j in range(NX):
            h = FD_POWER_STEP * _STATE_SCALE[j]
            Xp, Xm = Xl.copy(), Xl.copy()
            Xp[:, j] += h
            Xm[:, j] -= h
            dP[:, j] = (power_demand(Xp, cfg) - power_demand(Xm, cfg)) / (2 * h)
        return P, dP

    def residual_z(self, z):
        """Cost residuals with ``objective = 0.5 * ||r||^2``."""
        Xs, Us = self.split(z)
        P = power_demand(Xs[:-1], self.cfg) / self.P_ref
        dU = self._smooth_terms(Us)
        return np.concatenate([math.sqrt(2.0) * P, math.sqrt(2.0 * self.cfg.lambda_udot) * dU.ravel()])

    def residual_jac_z(self, z):
        N, dT = self.cfg.N, self.cfg.dT
        Xs, _ = self.split(z)
        _, dP = self.power_and_jacobian(Xs[:-1])
        rows = np.repeat(np.arange(N), NX)
        cols = np.arange(N * NX)
        vals = (math.sqrt(2.0) / self.P_ref) * dP.ravel()
        c = math.sqrt(2.0 * self.cfg.lambda_udot) / dT
        u0 = NX * (N + 1)
        k = np.arange((N - 1) * NU)
        rows_u = np.concatenate([N + k, N + k])
        cols_u = np.concatenate([u0 + NU + k, u0 + k])
        vals_u = np.concatenate([np.full(k.size, c), np.full(k.size, -c)])
        return sp.csr_matrix(
            (np.concatenate([vals, vals_u]), (np.concatenate([rows, rows_u]), np.concatenate([cols, cols_u]))),
            shape=(N + (N - 1) * NU, self.n_var),
        )

    def objective_z(self, z):
        r = self.residual_z(z)
        return 0.5 * float(r @ r)

    def objective_grad_z(self, z):
        return self.residual_jac_z(z).T @ self.residual_z(z)

    # -- constraints ------------------------------------------------------
    def _eq_scale(self):
        N = self.cfg.N
        s = np.tile(_STATE_SCALE, N + 1)
        return np.concatenate([s, [1.0]]) if self.cfg.terminal_on_surface else s

    def eq_z(self, z):
        cfg = self.cfg
        Xs, Us = self.split(z)
        xn, _, _ = rk4_step_jacobian(Xs[:-1], Us, cfg.dT, cfg)
        parts = [Xs[0] - np.asarray(cfg.x0), (Xs[1:] - xn).ravel()]
        if cfg.terminal_on_surface:
            parts.append([Xs[-1, Z] - float(cfg.pile.height(Xs[-1, X]))])
        return np.concatenate(parts) / self._eq_scale()

    def eq_jac_z(self, z):
        cfg = self.cfg
        N = cfg.N
        Xs, Us = self.split(z)
        _, Jx, Ju = rk4_step_jacobian(Xs[:-1], Us, cfg.dT, cfg)
        J = np.zeros((self.n_eq, self.n_var))
        J[:NX, :NX] = np.eye(NX)
        u0 = NX * (N + 1)
        for i in range(N):
            r = NX * (i + 1)
            J[r:r + NX, NX * (i + 1):NX * (i + 2)] = np.eye(NX)
            J[r:r + NX, NX * i:NX * (i + 1)] = -Jx[i]
            J[r:r + NX, u0 + NU * i:u0 + NU * (i + 1)] = -Ju[i]
        if cfg.terminal_on_surface:
            xN = Xs[-1, X]
            J[-1, NX * N + Z] = 1.0
            J[-1, NX * N + X] = -math.tan(float(cfg.pile.slope_at(xN)))
        return J / self._eq_scale()[:, None]

    def ineq_z(self, z):
        Xs, _ = self.split(z)
        return np.array([(Xs[-1, M] - self.cfg.m_min) / _STATE_SCALE[M]][:self.n_in])

    def ineq_jac_z(self, z):
        J = np.zeros((self.n_in, self.n_var))
        if self.n_in:
            J[0, NX * self.cfg.N + M] = 1.0 / _STATE_SCALE[M]
        return J

    # -- scaled wrappers for the solver -------------------------------------
    def f(self, y):
        return self.objective_z(self.to_z(y))

    def g(self, y):
        return self.objective_grad_z(self.to_z(y)) * self.scale

    def c_eq(self, y):
        return self.eq_z(self.to_z(y))

    def c_eq_jac(self, y):
        return self.eq_jac_z(self.to_z(y)) * self.scale

    def c_in(self, y):
        return self.ineq_z(self.to_z(y))

    def c_in_jac(self, y):
        return self.ineq_jac_z(self.to_z(y)) * self.scale

    def residual(self, y):
        return self.residual_z(self.to_z(y))

    def residual_jac(self, y):
        return self.residual_jac_z(self.to_z(y)) @ sp.diags(self.scale)

    def c_eq_jac_sparse(self, y):
        return sp.csr_matrix(self.c_eq_jac(y))

    def c_in_jac_sparse(self, y):
        return sp.csr_matrix(self.c_in_jac(y))

    # -- second order -------------------------------------------------------
    def power_hessian(self, Xl, h: float = 1e-4):
        """Second-difference Hessian of the power at each node, shape (N, 6, 6)."""
        Nn = len(Xl)
        steps = h * _STATE_SCALE
        pairs = [(j, k) for j in range(NX) for k in range(j, NX)]
        signs = ((1, 1), (1, -1), (-1, 1), (-1, -1))
        batch = np.empty((len(pairs), 4, Nn, NX))
        for p_i, (j, k) in enumerate(pairs):
            for s_i, (a, b) in enumerate(signs):
                Xp = Xl.copy()
                Xp[:, j] += a * steps[j]
                Xp[:, k] += b * steps[k]
                batch[p_i, s_i] = Xp
        vals = power_demand(batch.reshape(-1, NX), self.cfg).reshape(len(pairs), 4, Nn)
        Hp = np.empty((Nn, NX, NX))
        for p_i, (j, k) in enumerate(pairs):
            v = (vals[p_i, 0] - vals[p_i, 1] - vals[p_i, 2] + vals[p_i, 3]) / (4 * steps[j] * steps[k])
            Hp[:, j, k] = Hp[:, k, j] = v
        return Hp

    def dynamics_hessian(self, Xl, Us, mult, h: float = 1e-6):
        """Hessian of ``mult_i . F(X_i, U_i)`` per stage by differencing the analytic Jacobian, (N, 8, 8)."""
        cfg = self.cfg
        Nn = len(Xl)
        steps = h * np.concatenate([_STATE_SCALE, np.ones(NU)])
        XU = np.concatenate([Xl, Us], axis=1)
        pert = np.repeat(XU[None, None], 2 * (NX + NU), axis=0).reshape(NX + NU, 2, Nn, NX + NU).copy()
        for j in range(NX + NU):
            pert[j, 0, :, j] += steps[j]
            pert[j, 1, :, j] -= steps[j]
        flat = pert.reshape(-1, NX + NU)
        _, Jx, Ju = rk4_step_jacobian(flat[:, :NX], flat[:, NX:], cfg.dT, cfg)
        Jfull = np.concatenate([Jx, Ju], axis=2).reshape(NX + NU, 2, Nn, NX, NX + NU)
        grads = np.einsum("jsnab,na->jsnb", Jfull, mult)
        H = ((grads[:, 0] - grads[:, 1]) / (2 * steps[:, None, None])).transpose(1, 0, 2)
        return 0.5 * (H + H.transpose(0, 2, 1))

    def hessian(self, y, lam_eq, lam_in=None, convexify: bool = False):
        """Lagrangian Hessian in solver coordinates.

        Stage blocks (state and input of one interval) come from second
        differences of the power and of the RK4 Jacobian; the input-rate term
        is exact. With ``convexify`` each stage block is projected onto the
        positive semidefinite cone.
        """
        cfg = self.cfg
        N = cfg.N
        z = self.to_z(y)
        Xs, Us = self.split(z)
        Xl = Xs[:-1]
        P, dP = self.power_and_jacobian(Xl)
        Hp = self.power_hessian(Xl)
        mult = np.asarray(lam_eq[NX:NX * (N + 1)]).reshape(N, NX) / _STATE_SCALE
        B = self.dynamics_hessian(Xl, Us, mult)
        B[:, :NX, :NX] += (2.0 / self.P_ref**2) * (dP[:, :, None] * dP[:, None, :] + P[:, None, None] * Hp)
        sc = np.concatenate([_STATE_SCALE, np.ones(NU)])
        B = B * sc[None, :, None] * sc[None, None, :]
        if convexify:
            w, V = np.linalg.eigh(B)
            B = np.einsum("nij,nj,nkj->nik", V, np.maximum(w, 0.0), V)
        u0 = NX * (N + 1)
        rows, cols, vals = [], [], []
        for i in range(N):
            idx = np.concatenate([np.arange(NX * i, NX * (i + 1)), np.arange(u0 + NU * i, u0 + NU * (i + 1))])
            rows.append(np.repeat(idx, NX + NU))
            cols.append(np.tile(idx, NX + NU))
            vals.append(B[i].ravel())
        H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_var, self.n_var))
        D = sp.diags([-np.ones((N - 1) * NU), np.ones((N - 1) * NU)], [0, NU], shape=((N - 1) * NU, N * NU))
        Hu = (2.0 * cfg.lambda_udot / cfg.dT**2) * (D.T @ D)
        return H + sp.block_diag([sp.csr_matrix((u0, u0)), Hu])

    # -- diagnostics --------------------------------------------------------
    def feasibility(self, z) -> float:
        """Largest violation over equalities, the payload floor and boxes (unscaled units)."""
        y = self.to_y(z)
        viol = [np.max(np.abs(self.eq_z(z) * self._eq_scale())),
                max(0.0, float(self.cfg.m_min - self.split(z)[0][-1, M]))]
        lo = np.where(np.isfinite(self.lower), self.lower, -np.inf)
        hi = np.where(np.isfinite(self.upper), self.upper, np.inf)
        viol.append(float(np.max(np.maximum(lo - y, 0.0) * self.scale)))
        viol.append(float(np.max(np.maximum(y - hi, 0.0) * self.scale)))
        return float(max(viol))

    def kkt_residual(self, y, active_tol: float = 1e-6) -> float:
        """Stationarity residual with least-squares multiplier estimates.

        Multipliers for the equalities and the active inequality/bound set are
        fitted to the objective gradient; the residual is the infinity norm of
        the misfit relative to ``max(1, ||grad f||_inf)``.
        """
        g = self.g(y)
        cols = [self.c_eq_jac(y)]
        if self.n_in and self.c_in(y)[0] <= active_tol:
            cols.append(self.c_in_jac(y))
        at_lo = np.isfinite(self.lower) & (y - self.lower <= active_tol)
        at_hi = np.isfinite(self.upper) & (self.upper - y <= active_tol)
        idx = np.flatnonzero(at_lo | at_hi)
        if idx.size:
            E = np.zeros((idx.size, y.size))
            E[np.arange(idx.size), idx] = 1.0
            cols.append(E)
        A = np.vstack(cols)
        lam, *_ = np.linalg.lstsq(A.T, g, rcond=None)
        return float(np.max(np.abs(g - A.T @ lam)) / max(1.0, float(np.max(np.abs(g)))))


def _guess_states(cfg: OcpConfig, area: float | None = None):
    """Horizontal push at the start depth, then a straight rise to the pile surface.

    The exit point is chosen so that the region between the path and the
    surface holds ``area`` (default 1.2 m_min / (gamma w)).
    """
    N = cfg.N
    x0 = np.asarray(cfg.x0, dtype=float)
    hi = np.asarray(cfg.x_hi)
    lo = np.asarray(cfg.x_lo)
    gw = cfg.soil.gamma * cfg.tool.w
    area = area if area is not None else 1.2 * cfg.m_min / gw
    xs0, zs0 = x0[X], x0[Z]
    if area <= 0:
        # nothing to collect: coast with zero input
        return np.clip(simulate(x0, np.zeros((N, NU)), cfg.dT, cfg), lo, hi)

    def enclosed(xe):
        xm = xs0 + 0.5 * (xe - xs0)
        ze = float(cfg.pile.height(xe))
        px = np.array([xs0, xm, xe])
        pz = np.array([zs0, zs0, ze])
        grid = np.linspace(xs0, xe, 400)
        path_z = np.interp(grid, px, pz)
        return float(np.trapezoid(np.maximum(cfg.pile.height(grid) - path_z, 0.0), grid))

    x_cap = min(hi[X], np.inf)
    lo_x, hi_x = xs0 + 1e-6, x_cap
    if enclosed(hi_x) < area:
        xe = hi_x
    else:
        for _ in range(80):
            mid = 0.5 * (lo_x + hi_x)
            lo_x, hi_x = (mid, hi_x) if enclosed(mid) < area else (lo_x, mid)
        xe = 0.5 * (lo_x + hi_x)
    ze = float(np.clip(cfg.pile.height(xe), lo[Z], hi[Z]))
    s = np.linspace(0.0, 1.0, N + 1)
    Xs = np.tile(x0, (N + 1, 1))
    Xs[:, X] = xs0 + s * (xe - xs0)
    Xs[:, Z] = np.where(s < 0.5, zs0, zs0 + (s - 0.5) / 0.5 * (ze - zs0))
    Xs[:, M] = s * cfg.m_min
    speed = (xe - xs0) / cfg.t_f
    Xs[:, 1] = np.clip(speed, lo[1], hi[1])
    Xs[:, 2] = 0.0
    Xs[:, 3] = np.clip(s * 0.35, lo[3], hi[3])
    Xs[0] = x0
    return np.clip(Xs, lo, hi)


def initial_guess(cfg: OcpConfig):
    """States ramped along a feasible-looking path; inputs zero."""
    return _guess_states(cfg), np.zeros((cfg.N, NU))


def build_nlp(cfg: OcpConfig, guess=None) -> tuple:
    """Transcribe ``cfg``; returns ``(nlp, y0)`` with ``y0`` the scaled initial guess."""
    Xg, Ug = guess if guess is not None else initial_guess(cfg)
    N = cfg.N
    P_ref = cfg.P_ref
    if P_ref is None:
        P_ref = float(np.max(np.abs(power_demand(Xg[:-1], cfg))))
        if not P_ref >= P_REF_FLOOR:
            warnings.warn(f"initial guess draws under {P_REF_FLOOR} W; using P_ref = {P_REF_FLOOR} W",
                          stacklevel=2)
            P_ref = P_REF_FLOOR
    scale = np.concatenate([np.tile(_STATE_SCALE, N + 1), np.ones(NU * N)])
    lo = np.concatenate([np.tile(np.asarray(cfg.x_lo, float), N + 1), np.tile(np.asarray(cfg.u_lo, float), N)]) / scale
    hi = np.concatenate([np.tile(np.asarray(cfg.x_hi, float), N + 1), np.tile(np.asarray(cfg.u_hi, float), N)]) / scale
    # X_0 is pinned by its equality; bounds on it are redundant and would
    # leave a barrier term on an active bound (x0 sits on m_p = Phi = 0)
    lo[:NX], hi[:NX] = -np.inf, np.inf
    # the mass rate is never negative and RK4 weights are positive, so m_p
    # cannot fall below its start value; an explicit floor at that value
    # would leave the barrier without an interior while out of soil
    if cfg.x_lo[M] <= cfg.x0[M]:
        lo[M::NX][:N + 1] = -np.inf
    n_in = 1 if cfg.m_min > cfg.x0[M] else 0
    n_eq = NX * (N + 1) + (1 if cfg.terminal_on_surface else 0)
    # structural sparsity of the equality Jacobian
    sp = np.zeros((n_eq, scale.size), dtype=bool)
    sp[:NX, :NX] = True
    u0 = NX * (N + 1)
    for i in range(N):
        r = NX * (i + 1)
        sp[r:r + NX, NX * i:NX * (i + 2)] = True
        sp[r:r + NX, u0 + NU * i:u0 + NU * (i + 1)] = True
    if cfg.terminal_on_surface:
        sp[-1, NX * N + X] = sp[-1, NX * N + Z] = True
    nlp = Nlp(cfg=cfg, P_ref=P_ref, scale=scale, lower=lo, upper=hi, n_eq=n_eq, sparsity=sp, n_in=n_in)
    y0 = np.clip(nlp.to_y(nlp.pack(Xg, Ug)), lo, hi)
    return nlp, y0


def _slsqp(nlp: Nlp, y0, max_iter):
    bounds = [(None if not math.isfinite(a) else a, None if not math.isfinite(b) else b)
              for a, b in zip(nlp.lower, nlp.upper)]
    res = minimize(
        nlp.f, y0, jac=nlp.g, method="SLSQP", bounds=bounds,
        constraints=[{"type": "eq", "fun": nlp.c_eq, "jac": nlp.c_eq_jac}]
        + ([{"type": "ineq", "fun": nlp.c_in, "jac": nlp.c_in_jac}] if nlp.n_in else []),
        options={"maxiter": max_iter, "ftol": 1e-10},
    )
    lo = np.where(np.isfinite(nlp.lower), nlp.lower, -np.inf)
    hi = np.where(np.isfinite(nlp.upper), nlp.upper, np.inf)
    return np.clip(res.x, lo, hi), bool(res.success), str(res.message), int(res.nit)


def solve_ocp(cfg: OcpConfig | None = None, guess=None, max_iter: int = 200, tol: float = 1e-8,
              method: str = "ipm", raise_on_failure: bool = False) -> PlanSolution:
    """Solve the transcribed problem.

    Parameters
    ----------
    cfg : OcpConfig, optional
        Problem data; defaults to the reference scenario.
    guess : (states, inputs), optional
        Initial trajectory; defaults to :func:`initial_guess`.
    method : {"ipm", "slsqp"}
        ``"ipm"`` is the primal-dual interior point method of
        :mod:`feeplan.planner.ipm`; ``"slsqp"`` uses SciPy's dense SLSQP and
        estimates multipliers afterwards.

    Raises
    ------
    ConvergenceError
        Only when ``raise_on_failure`` is set and the solver did not converge;
        the best iterate is attached as ``diagnostics``.
    """
    cfg = cfg or OcpConfig()
    nlp, y0 = build_nlp(cfg, guess)
    lo = np.where(np.isfinite(nlp.lower), nlp.lower, -np.inf)
    hi = np.where(np.isfinite(nlp.upper), nlp.upper, np.inf)
    t0 = time.perf_counter()
    if method == "ipm":
        res = ipm_solve(nlp, y0, max_iter=max_iter, tol=tol)
        y, ok, msg, nit = res.y, res.converged, res.message, res.iterations
        kkt = res.kkt_residual
        if not ok and not msg.startswith("stalled"):
            # globalization failure: let the active-set method find the basin,
            # then recover multipliers with a warm-started interior point pass
            y1, ok1, msg1, nit1 = _slsqp(nlp, y0, max(max_iter, 500))
            res = ipm_solve(nlp, y1, max_iter=max_iter, tol=tol, mu0=WARM_MU0)
            y, ok, kkt = res.y, res.converged, res.kkt_residual
            nit += nit1 + res.iterations
            msg = f"{res.message} (after SLSQP recovery: {msg1})"
    elif method == "slsqp":
        y, ok, msg, nit = _slsqp(nlp, y0, max_iter)
        kkt = None
    else:
        raise ValueError(f"unknown method {method!r}")
    elapsed = time.perf_counter() - t0
    if kkt is None:
        kkt = nlp.kkt_residual(y)
    z = nlp.to_z(y)
    Xs, Us = nlp.split(z)
    P = power_demand(Xs[:-1], cfg)
    feas = nlp.feasibility(z)
    sol = PlanSolution(
        t=np.arange(cfg.N + 1) * cfg.dT,
        states=Xs.copy(),
        inputs=Us.copy(),
        power=P,
        energy=float(np.sum(P) * cfg.dT),
        payload=float(Xs[-1, M]),
        objective=float(nlp.f(y)),
        converged=bool(ok and feas <= 1e-6 and kkt <= 1e-6),
        message=msg,
        iterations=nit,
        solve_time=elapsed,
        feasibility=feas,
        kkt_residual=float(kkt),
        P_ref=nlp.P_ref,
    )
    if raise_on_failure and not sol.converged:
        raise ConvergenceError(f"planner did not converge: {sol.message}", diagnostics=sol)
    return sol
