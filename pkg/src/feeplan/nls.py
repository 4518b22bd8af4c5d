"""Bound-constrained nonlinear least squares.

Projected Levenberg-Marquardt (a trust-region Gauss-Newton variant) working
in coordinates scaled affinely to the unit box. Variables sitting on a bound
with the gradient pushing outward are frozen for the step; every trial point
is projected back into the box and only cost-decreasing steps are accepted,
so the recorded cost history is monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from feeplan.errors import InvalidInputError


@dataclass
class NlsDiagnostics:
    converged: bool
    message: str
    iterations: int
    nfev: int
    cost: float
    projected_gradient: float
    cost_history: list = field(default_factory=list)


def _fd_jacobian(fun, u, r0, step):
    J = np.empty((r0.size, u.size))
    for j in range(u.size):
        h = step
        up, um = u.copy(), u.copy()
        if u[j] + h > 1.0 and u[j] - h >= 0.0:
            um[j] -= h
            J[:, j] = (r0 - fun(um)) / h
        elif u[j] - h < 0.0 and u[j] + h <= 1.0:
            up[j] += h
            J[:, j] = (fun(up) - r0) / h
        else:
            up[j] += h
            um[j] -= h
            J[:, j] = (fun(up) - fun(um)) / (2 * h)
    return J


def bounded_nls_solve(residual_fn, x0, bounds, tol: float = 1e-10, max_iter: int = 500,
                      fd_step: float = 1e-6, ftol: float = 1e-15, xtol: float = 1e-12):
    """Minimize ``0.5 * ||residual_fn(x)||^2`` subject to ``lo <= x <= hi``.

    Parameters
    ----------
    residual_fn : callable
        Maps a parameter vector to a residual vector.
    x0 : array_like
        Starting point; must lie inside the bounds.
    bounds : (lo, hi)
        Finite bound vectors with ``lo < hi``.
    tol : float
        Tolerance on the infinity norm of the gradient over variables not
        held at a bound, in unit-box coordinates and relative to ``max(1, cost)``.
    max_iter : int
        Iteration cap; on reaching it the best point so far is returned with
        ``converged=False``.
    fd_step : float
        Finite-difference step in unit-box coordinates (central differences,
        one-sided next to a bound).

    Returns
    -------
    x : ndarray
        Best point found (always inside the bounds).
    diagnostics : NlsDiagnostics
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    x0 = np.asarray(x0, dtype=float)
    if not (lo.shape == hi.shape == x0.shape) or x0.ndim != 1:
        raise InvalidInputError("x0 and bounds must be 1-D arrays of equal length")
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(hi <= lo):
        raise InvalidInputError("bounds must be finite with lo < hi")
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise InvalidInputError("x0 lies outside the bounds")
    span = hi - lo
    nfev = 0

    def fun(u):
        nonlocal nfev
        nfev += 1
        return np.asarray(residual_fn(lo + span * u), dtype=float).ravel()

    u = (x0 - lo) / span
    r = fun(u)
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("residual is not finite at x0")
    cost = 0.5 * float(r @ r)
    history = [cost]
    mu, nu = None, 2.0
    message = "iteration limit reached"
    converged = False
    pg = math.inf
    it = 0
    J = g = None
    fresh = True
    while it < max_iter:
        if fresh:
            J = _fd_jacobian(fun, u, r, fd_step)
            g = J.T @ r
            blocked = ((u <= 0.0) & (g > 0)) | ((u >= 1.0) & (g < 0))
            pg = float(np.max(np.abs(np.where(blocked, 0.0, g)))) if u.size else 0.0
            if pg <= tol * max(1.0, cost):
                converged, message = True, "projected gradient below tolerance"
                break
            if cost == 0.0:
                converged, message = True, "zero residual"
                break
            JtJ = J.T @ J
            if mu is None:
                # damping multiplies diag(J^T J), so it is dimensionless
                mu = 1.0
        it += 1
        free = ~blocked
        step = np.zeros_like(u)
        if np.any(free):
            A = JtJ[np.ix_(free, free)]
            A = A + mu * (np.diag(np.diag(A)) + 1e-12 * np.eye(A.shape[0]))
            try:
                step[free] = np.linalg.solve(A, -g[free])
            except np.linalg.LinAlgError:
                step[free] = np.linalg.lstsq(A, -g[free], rcond=None)[0]
        u_new = np.clip(u + step, 0.0, 1.0)
        s = u_new - u
        if np.linalg.norm(s) <= xtol * (1.0 + np.linalg.norm(u)):
            converged, message = True, "step below tolerance"
            break
        r_new = fun(u_new)
        cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
        predicted = -(g @ s + 0.5 * s @ (JtJ @ s))
        actual = cost - cost_new
        ratio = actual / predicted if predicted > 0 else -1.0
        if actual > 0 and ratio > 1e-4:
            rel = actual / max(cost, 1e-300)
            u, r, cost = u_new, r_new, cost_new
            history.append(cost)
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * ratio - 1.0) ** 3)
            nu = 2.0
            fresh = True
            if rel <= ftol:
                converged, message = True, "relative cost reduction below tolerance"
                break
        else:
            mu *= nu
            nu *= 2.0
            fresh = False
            if mu > 1e30:
                converged, message = True, "no further decrease possible"
                break
    x = lo + span * u
    return x, NlsDiagnostics(
        converged=converged,
        message=message,
        iterations=it,
        nfev=nfev,
        cost=cost,
        projected_gradient=pg,
        cost_history=history,
    )
