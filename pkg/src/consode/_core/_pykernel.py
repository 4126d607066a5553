"""Pure-Python stepping kernel.

Reference implementation of the kernel interface; ``_ckernel.pyx`` mirrors it
operation for operation.
"""
from __future__ import annotations

import weakref

import numpy as np

from ..multiplier import SINGULAR_RTOL, MinorSingular
from ..polynomial import ipow
from ..solver import NotConverged, SingularJacobian, SolveResult, _maxabs, _newton, lu_factor, lu_solve
from ..solver import NewtonConfig

_CACHE = weakref.WeakKeyDictionary()


class _Sys:
    __slots__ = ("n", "m", "half", "mode", "perm", "f", "psi", "fh", "fh_var")

    def __init__(self, ps):
        self.n, self.m, self.half, self.mode = ps.n, ps.m, ps.half, ps.mode
        self.perm = [int(v) for v in ps.perm]
        self.f = _block(ps.f_coef, ps.f_exp, ps.f_off)
        self.psi = _block(ps.psi_coef, ps.psi_exp, ps.psi_off)
        self.fh = _block(ps.fh_coef, ps.fh_exp, ps.fh_off)
        self.fh_var = [int(v) for v in ps.fh_var]


def _block(coef, exps, off):
    polys = []
    for k in range(len(off) - 1):
        terms = []
        for t in range(int(off[k]), int(off[k + 1])):
            alpha = tuple(int(e) for e in exps[t])
            nz = tuple((r, e) for r, e in enumerate(alpha) if e)
            terms.append((float(coef[t]), alpha, nz))
        polys.append(terms)
    return polys


def _sys(ps) -> _Sys:
    s = _CACHE.get(ps)
    if s is None:
        s = _CACHE[ps] = _Sys(ps)
    return s


def _eval(terms, x):
    acc = 0.0
    for c, _, nz in terms:
        for r, e in nz:
            c *= ipow(x[r], e)
        acc += c
    return acc


def _fdf(terms, j, xp, xn):
    acc = 0.0
    for c, alpha, nz in terms:
        e = alpha[j]
        if not e:
            continue
        g = 0.0
        for l in range(e):
            g += ipow(xn[j], l) * ipow(xp[j], e - l - 1)
        t = c * g
        for r, a in nz:
            if r != j:
                t *= ipow(xp[r] if r < j else xn[r], a)
        acc += t
    return acc


def _lambda(s, xp, xn):
    return [[_fdf(terms, j, xp, xn) for j in range(s.n)] for terms in s.psi]


def _fhat(s, xp, xn):
    if s.mode == 0:
        return [_fdf(terms, v, xp, xn) for terms, v in zip(s.fh, s.fh_var)]
    if s.mode == 1:
        return [0.5 * (_eval(terms, xp) + _eval(terms, xn)) for terms in s.fh]
    mid = [0.5 * (a + b) for a, b in zip(xp, xn)]
    return [_eval(terms, mid) for terms in s.fh]


def _velocity(s, xp, xn):
    """Discrete vector field ``(-(minor)^-1 rest fhat ; fhat)`` in state order."""
    n, m, perm = s.n, s.m, s.perm
    lam = _lambda(s, xp, xn)
    fh = _fhat(s, xp, xn)
    rowmax = 0.0
    for row in lam:
        acc = 0.0
        for v in row:
            acc += abs(v)
        if acc > rowmax:
            rowmax = acc
    minor = [[row[perm[b]] for b in range(m)] for row in lam]
    rhs = []
    for row in lam:
        acc = 0.0
        for c in range(n - m):
            acc += row[perm[m + c]] * fh[c]
        rhs.append(acc)
    try:
        lu, piv, det = lu_factor(minor)
        for k in range(m):
            det *= lu[k][k]
    except ZeroDivisionError:
        det = 0.0
    if not abs(det) >= SINGULAR_RTOL * (1.0 + rowmax):
        raise MinorSingular(xp, xn, det)
    w = lu_solve(lu, piv, rhs)
    vel = [0.0] * n
    for b in range(m):
        vel[perm[b]] = -w[b]
    for c in range(n - m):
        vel[perm[m + c]] = fh[c]
    return vel


def _cons_residual(s, xp, xn, tau):
    vel = _velocity(s, xp, xn)
    return [(xn[i] - xp[i]) / tau - vel[i] for i in range(s.n)]


def _rhs(s, x):
    return [_eval(terms, x) for terms in s.f]


def _explicit(s, kind, x, tau):
    if kind == 1:
        f = _rhs(s, x)
        return [x[i] + tau * f[i] for i in range(s.n)]
    h, ht = s.half, 0.5 * tau
    y = list(x)
    k = [_eval(s.f[h + i], y) for i in range(h)]
    for i in range(h):
        y[h + i] = x[h + i] + ht * k[i]
    d = [_eval(s.f[i], y) for i in range(h)]
    for i in range(h):
        y[i] = x[i] + tau * d[i]
    k = [_eval(s.f[h + i], y) for i in range(h)]
    for i in range(h):
        y[h + i] = y[h + i] + ht * k[i]
    return y


def _residual_fn(s, kind, xp, tau):
    n = s.n
    if kind == 0:
        return lambda xn: _cons_residual(s, xp, xn, tau)
    if kind == 2:
        def res(xn):
            f = _rhs(s, xn)
            return [(xn[i] - xp[i]) / tau - f[i] for i in range(n)]
        return res

    def res(xn):
        mid = [0.5 * (xp[i] + xn[i]) for i in range(n)]
        f = _rhs(s, mid)
        return [(xn[i] - xp[i]) / tau - f[i] for i in range(n)]
    return res


def _implicit(s, kind, xp, tau, cfg, stall_tol):
    f = _rhs(s, xp)
    guess = [xp[i] + tau * f[i] for i in range(s.n)]
    x, it, nr, conv, stalled = _newton(_residual_fn(s, kind, xp, tau), guess, cfg)
    if conv:
        return x, it, nr, 0
    if stalled and nr <= stall_tol:
        return x, it, nr, 1
    raise NotConverged(SolveResult(np.array(x), it, nr, False, False))


def _cfg(abs_tol, max_iters, fd_step, damping):
    return NewtonConfig(abs_tol=abs_tol, max_iters=max_iters, fd_step=fd_step, damping=damping)


def _step(s, kind, x, tau, cfg, stall_tol):
    if kind in (1, 3):
        if kind == 3 and s.half < 0:
            raise ValueError("Stormer-Verlet needs a separable system")
        return _explicit(s, kind, x, tau), 0, 0.0, 0
    return _implicit(s, kind, x, tau, cfg, stall_tol)


# public kernel interface -------------------------------------------------

def lambda_tau(ps, x_prev, x_next):
    s = _sys(ps)
    return np.array(_lambda(s, [float(v) for v in x_prev], [float(v) for v in x_next]))


def fhat(ps, x_prev, x_next):
    s = _sys(ps)
    return np.array(_fhat(s, [float(v) for v in x_prev], [float(v) for v in x_next]))


def velocity(ps, x_prev, x_next):
    s = _sys(ps)
    return np.array(_velocity(s, [float(v) for v in x_prev], [float(v) for v in x_next]))


def conservative_residual(ps, x_prev, x_next, tau):
    s = _sys(ps)
    return np.array(_cons_residual(s, [float(v) for v in x_prev], [float(v) for v in x_next], float(tau)))


def step(ps, kind, x, tau, abs_tol, max_iters, fd_step, damping, stall_tol):
    """One step; returns ``(x_next, newton_iters, residual, flag)``.

    ``flag`` is 0 for a converged (or explicit) step and 1 for a step
    accepted at the residual round-off floor.
    """
    s = _sys(ps)
    cfg = _cfg(abs_tol, max_iters, fd_step, damping)
    xn, it, nr, flag = _step(s, kind, [float(v) for v in x], float(tau), cfg, stall_tol)
    return np.array(xn), it, nr, flag


def integrate(ps, kind, x0, tau, n_steps, abs_tol, max_iters, fd_step, damping, stall_tol, r_div):
    """Run ``n_steps`` steps.

    Returns ``(states, iters, resid, flags, status, fail_step, fail_x, fail_resid, fail_det)``
    where the arrays cover the accepted states ``x_0..x_K``. On divergence the
    offending state is included as the last row.
    """
    from . import (STATUS_DIVERGED, STATUS_MINOR_SINGULAR, STATUS_NOT_CONVERGED,
                   STATUS_OK, STATUS_SINGULAR_JACOBIAN)

    s = _sys(ps)
    n = s.n
    tau = float(tau)
    cfg = _cfg(abs_tol, max_iters, fd_step, damping)
    if kind == 3 and s.half < 0:
        raise ValueError("Stormer-Verlet needs a separable system")
    states = np.empty((n_steps + 1, n))
    iters = np.zeros(n_steps + 1, dtype=np.int32)
    resid = np.zeros(n_steps + 1)
    flags = np.zeros(n_steps + 1, dtype=np.int8)
    x = [float(v) for v in x0]
    states[0] = x
    status, fail_step, fail_x, fail_resid, fail_det = STATUS_OK, -1, None, 0.0, 0.0
    k = 0
    for k in range(1, n_steps + 1):
        try:
            xn, it, nr, flag = _step(s, kind, x, tau, cfg, stall_tol)
        except NotConverged as exc:
            status, fail_x, fail_resid = STATUS_NOT_CONVERGED, exc.result.root, exc.result.residual_norm
        except MinorSingular as exc:
            status, fail_x, fail_det = STATUS_MINOR_SINGULAR, exc.x_next, exc.det
        except SingularJacobian as exc:
            status, fail_x = STATUS_SINGULAR_JACOBIAN, exc.x
        if status != STATUS_OK:
            fail_step = k
            k -= 1
            break
        states[k] = xn
        iters[k] = it
        resid[k] = nr
        flags[k] = flag
        x = xn
        if not _maxabs(xn) <= r_div:
            status, fail_step = STATUS_DIVERGED, k
            break
    last = k + 1
    return (states[:last].copy(), iters[:last].copy(), resid[:last].copy(), flags[:last].copy(),
            status, fail_step, fail_x, fail_resid, fail_det)
