"""Damped Newton iteration for the implicit per-step equations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "NewtonConfig",
    "SolveResult",
    "NotConverged",
    "SingularJacobian",
    "newton_solve",
    "lu_factor",
    "lu_solve",
]

PIVOT_FLOOR = 1e-300
MAX_HALVINGS = 30


@dataclass(frozen=True)
class NewtonConfig:
    """Stopping and damping parameters.

    ``abs_tol`` bounds the infinity norm of the residual. When the iteration
    stalls (neither the Newton step nor any of the backtracked steps lowers
    the residual) the iterate is at the round-off floor of the residual
    evaluation; it is accepted if its residual is at most
    ``stall_factor * abs_tol``. ``stall_factor=1`` makes the tolerance strict.
    """

    abs_tol: float = 5e-16
    max_iters: int = 50
    fd_step: float = 1e-7
    damping: float = 0.5
    stall_factor: float = 4.0

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.stall_factor < 1:
            raise ValueError("stall_factor must be >= 1")

    @property
    def stall_tol(self) -> float:
        return self.stall_factor * self.abs_tol


@dataclass(frozen=True)
class SolveResult:
    root: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    stalled: bool = False

    @property
    def accepted(self) -> bool:
        return self.converged or self.stalled


class NotConverged(RuntimeError):
    """Newton failed; ``result`` holds the best iterate found."""

    def __init__(self, result: SolveResult, step: Optional[int] = None):
        self.result = result
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"Newton did not converge{where}: residual {result.residual_norm:.3e} "
            f"after {result.iterations} iterations")


class SingularJacobian(ArithmeticError):
    def __init__(self, x, step: Optional[int] = None):
        self.x = np.asarray(x, dtype=float)
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"singular Newton Jacobian{where}")


def lu_factor(a):
    """In-place LU with partial pivoting on a list-of-lists matrix.

    Ties between equal pivot candidates go to the lowest row index. Returns
    ``(lu, perm, sign)``; raises :class:`ZeroDivisionError` when a pivot is
    below ``1e-300`` in magnitude.
    """
    n = len(a)
    perm = list(range(n))
    sign = 1.0
    for k in range(n):
        p = k
        best = abs(a[k][k])
        for i in range(k + 1, n):
            v = abs(a[i][k])
            if v > best:
                best = v
                p = i
        if not best >= PIVOT_FLOOR:
            raise ZeroDivisionError("pivot below floor")
        if p != k:
            a[k], a[p] = a[p], a[k]
            perm[k], perm[p] = perm[p], perm[k]
            sign = -sign
        piv = a[k][k]
        rowk = a[k]
        for i in range(k + 1, n):
            rowi = a[i]
            l = rowi[k] / piv
            rowi[k] = l
            for j in range(k + 1, n):
                rowi[j] = rowi[j] - l * rowk[j]
    return a, perm, sign


def lu_solve(lu, perm, b):
    n = len(lu)
    y = [b[perm[i]] for i in range(n)]
    for i in range(n):
        row = lu[i]
        s = y[i]
        for j in range(i):
            s = s - row[j] * y[j]
        y[i] = s
    for i in range(n - 1, -1, -1):
        row = lu[i]
        s = y[i]
        for j in range(i + 1, n):
            s = s - row[j] * y[j]
        y[i] = s / row[i]
    return y


def _maxabs(v) -> float:
    m = 0.0
    for e in v:
        a = abs(e)
        if a > m or a != a:
            m = a
    return m


def _newton(residual, x, cfg: NewtonConfig, jacobian=None):
    """List-based Newton core. Returns ``(x, iters, norm, converged, stalled)``."""
    n = len(x)
    r = residual(x)
    nr = _maxabs(r)
    it = 0
    stalled = False
    while not nr <= cfg.abs_tol and it < cfg.max_iters:
        if jacobian is None:
            jac = [[0.0] * n for _ in range(n)]
            for j in range(n):
                xj = x[j]
                h = cfg.fd_step * (1.0 + abs(xj))
                x[j] = xj + h
                rj = residual(x)
                x[j] = xj
                for i in range(n):
                    jac[i][j] = (rj[i] - r[i]) / h
        else:
            jac = [[float(v) for v in row] for row in jacobian(x)]
        try:
            lu, perm, _ = lu_factor(jac)
        except ZeroDivisionError:
            raise SingularJacobian(x) from None
        d = lu_solve(lu, perm, r)
        lam = 1.0
        improved = False
        for _ in range(MAX_HALVINGS + 1):
            xt = [x[i] - lam * d[i] for i in range(n)]
            rt = residual(xt)
            nt = _maxabs(rt)
            if nt < nr:
                improved = True
                break
            lam *= cfg.damping
        it += 1
        if not improved:
            stalled = True
            break
        x, r, nr = xt, rt, nt
    return x, it, nr, nr <= cfg.abs_tol, stalled


def newton_solve(residual: Callable, x0: Sequence[float], cfg: NewtonConfig = NewtonConfig(),
                 jacobian: Optional[Callable] = None) -> SolveResult:
    """Solve ``residual(x) = 0`` from ``x0``.

    The Jacobian defaults to forward differences with increment
    ``fd_step * (1 + |x_i|)``. Each Newton step is shortened by the damping
    factor while the residual infinity norm fails to decrease (at most 30
    times).

    Raises
    ------
    NotConverged
        If the tolerance is not met within ``max_iters`` iterations, or the
        iteration stalls above ``cfg.stall_tol``.
    SingularJacobian
        If LU meets a pivot smaller than ``1e-300``.
    """
    x = [float(v) for v in x0]

    def res(v):
        return [float(e) for e in residual(np.array(v))]

    jac = None if jacobian is None else (lambda v: jacobian(np.array(v)))
    x, it, nr, conv, stalled = _newton(res, x, cfg, jac)
    result = SolveResult(np.array(x), it, nr, conv, stalled and not conv and nr <= cfg.stall_tol)
    if not result.accepted:
        raise NotConverged(result)
    return result
