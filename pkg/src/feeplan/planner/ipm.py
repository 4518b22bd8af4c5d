"""Primal-dual interior point method for bound-constrained NLPs.

Solves ``min f(y)`` subject to ``c_eq(y) = 0``, ``c_in(y) >= 0`` and
``lower <= y <= upper``. Inequalities become equalities with nonnegative
slacks; all bounds are handled by a logarithmic barrier whose parameter
follows the monotone Fiacco-McCormick rule. Newton steps on the primal-dual
barrier conditions are computed from the sparse symmetric KKT system and
globalized by backtracking on an l1 exact-penalty merit function, with a
second-order correction on the first trial step. When the KKT matrix has the
wrong inertia (the Hessian is not positive definite on the constraint null
space) a multiple of the identity is added to the Hessian block until it does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal, ldl
from scipy.sparse.linalg import splu

KAPPA_EPS = 10.0
KAPPA_MU = 0.2
THETA_MU = 1.5
S_MAX = 100.0
KAPPA_SIGMA = 1e10
ARMIJO = 1e-8
DELTA_W_FIRST = 1e-4
DELTA_W_MAX = 1e40
DELTA_C = 1e-8
STALL_ITERS = 15


class BarrierNlp(Protocol):
    lower: np.ndarray
    upper: np.ndarray

    def f(self, y) -> float: ...
    def g(self, y) -> np.ndarray: ...
    def c_eq(self, y) -> np.ndarray: ...
    def c_eq_jac_sparse(self, y) -> sp.spmatrix: ...
    def c_in(self, y) -> np.ndarray: ...
    def c_in_jac_sparse(self, y) -> sp.spmatrix: ...
    def hessian(self, y, lam_eq, lam_in) -> sp.spmatrix: ...


@dataclass
class IpmResult:
    y: np.ndarray
    converged: bool
    message: str
    iterations: int
    kkt_residual: float  # scaled optimality error at mu = 0
    constraint_violation: float
    lam_eq: np.ndarray
    lam_in: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    merit_history: list = field(default_factory=list)


def _push_inside(x, lo, hi, k1=1e-2, k2=1e-2):
    x = x.copy()
    fl, fu = np.isfinite(lo), np.isfinite(hi)
    width = np.where(fl & fu, hi - lo, np.inf)
    pl = np.minimum(k1 * np.maximum(1.0, np.abs(np.where(fl, lo, 0.0))), k2 * width)
    pu = np.minimum(k1 * np.maximum(1.0, np.abs(np.where(fu, hi, 0.0))), k2 * width)
    x = np.where(fl, np.maximum(x, lo + pl), x)
    x = np.where(fu, np.minimum(x, hi - pu), x)
    return x


def _max_step(v, dv, tau):
    """Largest alpha in (0, 1] with ``v + alpha dv >= (1 - tau) v`` for ``v > 0``."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def inertia(K) -> tuple:
    """``(positive, negative, zero)`` eigenvalue counts of a symmetric matrix via LDL^T."""
    _, d, _ = ldl(np.asarray(K), lower=True)
    off = np.diag(d, -1).copy()
    w = eigvalsh_tridiagonal(np.diag(d).copy(), off) if d.shape[0] > 1 else np.diag(d)
    # barrier terms make the spectrum span many decades; only near-exact zeros count
    zero = np.abs(w) <= 1e-20
    return int(np.sum((w > 0) & ~zero)), int(np.sum((w < 0) & ~zero)), int(np.sum(zero))


def ipm_solve(nlp: BarrierNlp, y0, tol: float = 1e-8, max_iter: int = 300, mu0: float = 0.1,
              callback=None) -> IpmResult:
    """Run the interior point method from ``y0``; converged when the scaled KKT error is at most ``tol``."""
    lo_y, hi_y = np.asarray(nlp.lower, float), np.asarray(nlp.upper, float)
    y = np.asarray(y0, dtype=float)
    n = y.size
    ci0 = np.asarray(nlp.c_in(np.clip(y, lo_y, hi_y)))
    mi = ci0.size
    me = np.asarray(nlp.c_eq(np.clip(y, lo_y, hi_y))).size
    L = np.concatenate([lo_y, np.zeros(mi)])
    U = np.concatenate([hi_y, np.full(mi, np.inf)])
    fl, fu = np.isfinite(L), np.isfinite(U)
    x = _push_inside(np.concatenate([np.clip(y, lo_y, hi_y), np.maximum(ci0, 0.0)]), L, U)
    nx = x.size
    zl = np.where(fl, 1.0, 0.0)
    zu = np.where(fu, 1.0, 0.0)
    lam = np.zeros(me + mi)
    mu = mu0
    nu = 1.0
    dw_last = 0.0
    best_err, best_it = math.inf, 0
    history = []
    message = "iteration limit reached"
    converged = False

    def split(xx):
        return xx[:n], xx[n:]

    def cons(xx):
        yy, ss = split(xx)
        return np.concatenate([nlp.c_eq(yy), nlp.c_in(yy) - ss])

    def jac(yy):
        Je = sp.csr_matrix(nlp.c_eq_jac_sparse(yy))
        Ji = sp.csr_matrix(nlp.c_in_jac_sparse(yy))
        return sp.bmat([[Je, None], [Ji, -sp.identity(mi)]], format="csr") if mi else Je

    def slack_l(xx):
        return np.where(fl, xx - np.where(fl, L, 0.0), 1.0)

    def slack_u(xx):
        return np.where(fu, np.where(fu, U, 0.0) - xx, 1.0)

    def barrier(xx, mu_):
        sl, su = slack_l(xx), slack_u(xx)
        if np.any(sl[fl] <= 0) or np.any(su[fu] <= 0):
            return math.inf
        return nlp.f(split(xx)[0]) - mu_ * (np.sum(np.log(sl[fl])) + np.sum(np.log(su[fu])))

    def merit(xx, mu_, nu_, cval=None):
        cval = cons(xx) if cval is None else cval
        return barrier(xx, mu_) + nu_ * float(np.sum(np.abs(cval)))

    def errors(gx, J, c, mu_):
        stat = gx - J.T @ lam - zl + zu
        sd = max(S_MAX, (np.sum(np.abs(lam)) + np.sum(zl) + np.sum(zu)) / max(1, me + mi + 2 * nx)) / S_MAX
        sc = max(S_MAX, (np.sum(zl) + np.sum(zu)) / max(1, 2 * nx)) / S_MAX
        comp = np.concatenate([(slack_l(x) * zl - mu_)[fl], (slack_u(x) * zu - mu_)[fu]])
        e_stat = float(np.max(np.abs(stat))) / sd
        e_comp = float(np.max(np.abs(comp), initial=0.0)) / sc
        return max(e_stat, float(np.max(np.abs(c), initial=0.0)), e_comp), max(e_stat, e_comp)

    it = 0
    kkt = math.inf
    for it in range(max_iter + 1):
        yv, sv = split(x)
        gx = np.concatenate([nlp.g(yv), np.zeros(mi)])
        c = cons(x)
        J = jac(yv)
        E0, kkt = errors(gx, J, c, 0.0)
        if E0 <= tol:
            converged, message = True, "KKT conditions satisfied"
            break
        if E0 < 0.5 * best_err:
            best_err, best_it = E0, it
        elif it - best_it >= STALL_ITERS and mu <= tol:
            # typical at a kink of a nonsmooth model: no further KKT progress
            message = "stalled: optimality error no longer decreasing"
            break
        if it == max_iter:
            break
        while errors(gx, J, c, mu)[0] <= KAPPA_EPS * mu and mu > tol / 10:
            mu = max(tol / 10, min(KAPPA_MU * mu, mu ** THETA_MU))
        tau = max(0.99, 1.0 - mu)

        sl, su = slack_l(x), slack_u(x)
        sig = np.where(fl, zl / sl, 0.0) + np.where(fu, zu / su, 0.0)
        r_d = gx - J.T @ lam - np.where(fl, mu / sl, 0.0) + np.where(fu, mu / su, 0.0)
        Wy = sp.csr_matrix(nlp.hessian(yv, lam[:me], lam[me:]))
        W = sp.block_diag([Wy, sp.csr_matrix((mi, mi))]) if mi else Wy
        dw, dc = 0.0, 0.0
        while True:
            K = sp.bmat([[W + sp.diags(sig + dw), J.T], [J, -dc * sp.identity(me + mi)]], format="csc")
            pos, neg, zero = inertia(K.toarray())
            if pos == nx and neg == me + mi:
                break
            if zero and dc == 0.0:
                dc = DELTA_C * mu ** 0.25
                continue
            if dw == 0.0:
                dw = DELTA_W_FIRST if dw_last == 0.0 else max(1e-20, dw_last / 3.0)
            else:
                dw *= 100.0 if dw_last == 0.0 else 8.0
            if dw > DELTA_W_MAX:
                break
        if dw > DELTA_W_MAX:
            message = "could not correct the KKT inertia"
            break
        dw_last = dw if dw > 0 else dw_last
        try:
            lu = splu(K)
        except RuntimeError:
            message = "singular KKT matrix"
            break
        sol = lu.solve(-np.concatenate([r_d, c]))
        dx, dlam = sol[:nx], -sol[nx:]
        dzl = np.where(fl, mu / sl - zl - zl / sl * dx, 0.0)
        dzu = np.where(fu, mu / su - zu + zu / su * dx, 0.0)

        a_max = min(_max_step(sl[fl], dx[fl], tau), _max_step(su[fu], -dx[fu], tau))
        a_z = min(_max_step(zl[fl], dzl[fl], tau), _max_step(zu[fu], dzu[fu], tau))

        nu = max(nu, 1.1 * float(np.max(np.abs(lam + dlam), initial=0.0)) + 1e-6)
        grad_bar = gx - np.where(fl, mu / sl, 0.0) + np.where(fu, mu / su, 0.0)
        c_l1 = float(np.sum(np.abs(c)))
        D = float(grad_bar @ dx) - nu * c_l1
        phi0 = merit(x, mu, nu, c)
        history.append(phi0)
        if D >= 0:
            D = -1e-16 * max(1.0, abs(phi0))

        alpha = a_max
        accepted = False
        first = True
        while alpha >= 1e-14:
            x_t = x + alpha * dx
            c_t = cons(x_t)
            if merit(x_t, mu, nu, c_t) <= phi0 + ARMIJO * alpha * D:
                accepted = True
                break
            if first:
                first = False
                sol_c = lu.solve(-np.concatenate([r_d, alpha * c + c_t]))
                dxc = sol_c[:nx]
                a_c = min(_max_step(sl[fl], dxc[fl], tau), _max_step(su[fu], -dxc[fu], tau))
                x_c = x + a_c * dxc
                if merit(x_c, mu, nu) <= phi0 + ARMIJO * alpha * D:
                    x_t, accepted = x_c, True
                    break
            alpha *= 0.5
        if not accepted:
            message = "line search failed to decrease the merit function"
            break
        x = x_t
        lam = lam + alpha * dlam
        zl = zl + a_z * dzl
        zu = zu + a_z * dzu
        # keep bound multipliers within a factor of the primal-dual central path
        sl, su = slack_l(x), slack_u(x)
        zl = np.where(fl, np.clip(zl, mu / (KAPPA_SIGMA * sl), KAPPA_SIGMA * mu / sl), 0.0)
        zu = np.where(fu, np.clip(zu, mu / (KAPPA_SIGMA * su), KAPPA_SIGMA * mu / su), 0.0)
        if callback is not None:
            callback(it, split(x)[0], mu, E0)

    yv, sv = split(x)
    c = cons(x)
    viol = float(max(np.max(np.abs(nlp.c_eq(yv)), initial=0.0),
                     np.max(np.maximum(-np.asarray(nlp.c_in(yv)), 0.0), initial=0.0)))
    return IpmResult(
        y=yv,
        converged=converged,
        message=message,
        iterations=it,
        kkt_residual=kkt,
        constraint_violation=viol,
        lam_eq=lam[:me],
        lam_in=lam[me:],
        z_lower=zl[:n],
        z_upper=zu[:n],
        merit_history=history,
    )
