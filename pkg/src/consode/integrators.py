"""One-step integrators behind a uniform interface.

``conservative_multiplier`` is the multiplier-method scheme

    (x' - x) / tau = P(x, x') fhat(x, x'),   P = [-(minor)^-1 rest ; I]

with ``minor``/``rest`` the column blocks of the discrete multiplier. It keeps
every conserved polynomial constant up to the Newton tolerance. The other
kinds are the usual baselines. :func:`integrate` runs any of them through the
active kernel; the ``*_step`` functions for the baselines take plain
callables and are independent of the kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _core
from ._core import KINDS, FHAT_FORMS
from .multiplier import ConservedSystem, DiscreteMultiplier, MinorSingular
from .solver import NewtonConfig, NotConverged, SingularJacobian, SolveResult, newton_solve

__all__ = [
    "StepperSpec",
    "Trajectory",
    "conservative_step",
    "constraint_residual",
    "euler_step",
    "backward_euler_step",
    "stormer_verlet_step",
    "implicit_midpoint_step",
    "integrate",
    "write_trajectory_csv",
    "DEFAULT_R_DIV",
]

DEFAULT_R_DIV = 1e3
IMPLICIT = {"conservative_multiplier", "backward_euler", "implicit_midpoint"}


@dataclass(frozen=True)
class StepperSpec:
    kind: str
    tau: float
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    fhat_form: str = "polarized"
    fhat_vars: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stepper kind {self.kind!r}; choose from {sorted(KINDS)}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.fhat_form not in FHAT_FORMS:
            raise ValueError(f"unknown fhat form {self.fhat_form!r}")

    @property
    def implicit(self) -> bool:
        return self.kind in IMPLICIT


@dataclass
class Trajectory:
    """States ``x_0..x_K`` of a run with per-step solver metadata.

    ``status`` is ``"ok"``, ``"step_failure"`` (Newton or minor failure at
    ``failed_step``, whose state is not stored) or ``"diverged"`` (the stored
    last state left the ball of radius ``r_div``).
    """

    states: np.ndarray
    tau: float
    kind: str
    iterations: np.ndarray
    residuals: np.ndarray
    flags: np.ndarray
    status: str = "ok"
    failed_step: Optional[int] = None
    error: Optional[Exception] = None
    r_div: float = DEFAULT_R_DIV

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.tau

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def raise_for_status(self):
        if self.error is not None:
            raise self.error


def _newton_args(spec: StepperSpec):
    c = spec.newton
    return c.abs_tol, c.max_iters, c.fd_step, c.damping, c.stall_tol


def conservative_step(system: ConservedSystem, dm: DiscreteMultiplier, x_prev, spec: StepperSpec,
                      check: bool = False, backend: Optional[str] = None) -> np.ndarray:
    """Advance one multiplier-method step from ``x_prev``.

    With ``check=True`` the discrete constraint ``Lambda_tau f_tau = 0`` is
    verified at the accepted step (see :func:`constraint_residual`).

    Raises
    ------
    NotConverged, MinorSingular, SingularJacobian
    """
    if dm.system is not system:
        raise ValueError("discrete multiplier belongs to a different system")
    ps = dm.packed(spec.fhat_form, spec.fhat_vars)
    k = _core.get_kernel(backend)
    x_next, _, _, _ = k.step(ps, KINDS["conservative_multiplier"], x_prev, spec.tau, *_newton_args(spec))
    if check:
        r = constraint_residual(dm, x_prev, x_next, spec, backend)
        if r > 1e-12:
            raise AssertionError(f"Lambda_tau f_tau = {r:.3e} exceeds 1e-12")
    return x_next


def constraint_residual(dm: DiscreteMultiplier, x_prev, x_next, spec: StepperSpec,
                        backend: Optional[str] = None) -> float:
    """Scaled ``max_i |(Lambda_tau f_tau)_i| / (1 + sum_j |Lambda_ij f_j|)``."""
    ps = dm.packed(spec.fhat_form, spec.fhat_vars)
    k = _core.get_kernel(backend)
    lam = k.lambda_tau(ps, x_prev, x_next)
    vel = k.velocity(ps, x_prev, x_next)
    prod = lam * vel
    return float((np.abs(prod.sum(axis=1)) / (1.0 + np.abs(prod).sum(axis=1))).max())


def euler_step(f: Callable, x_prev, tau: float) -> np.ndarray:
    x = np.asarray(x_prev, dtype=float)
    return x + tau * np.asarray(f(x), dtype=float)


def backward_euler_step(f: Callable, x_prev, tau: float, newton: NewtonConfig = NewtonConfig()) -> np.ndarray:
    x = np.asarray(x_prev, dtype=float)
    res = newton_solve(lambda z: (z - x) / tau - np.asarray(f(z)), euler_step(f, x, tau), newton)
    return res.root


def implicit_midpoint_step(f: Callable, x_prev, tau: float, newton: NewtonConfig = NewtonConfig()) -> np.ndarray:
    x = np.asarray(x_prev, dtype=float)
    res = newton_solve(lambda z: (z - x) / tau - np.asarray(f(0.5 * (x + z))), euler_step(f, x, tau), newton)
    return res.root


def stormer_verlet_step(g: Callable, h: Callable, state, tau: float) -> np.ndarray:
    """Kick-drift-kick step for ``q' = g(p), p' = h(q)``; ``state`` is ``(q, p)`` concatenated."""
    s = np.asarray(state, dtype=float)
    if s.size % 2:
        raise ValueError("state must hold q and p of equal length")
    k = s.size // 2
    q, p = s[:k], s[k:]
    ht = 0.5 * tau
    p_half = p + ht * np.asarray(h(q), dtype=float)
    q_new = q + tau * np.asarray(g(p_half), dtype=float)
    p_new = p_half + ht * np.asarray(h(q_new), dtype=float)
    return np.concatenate([q_new, p_new])


def integrate(system: ConservedSystem, spec: StepperSpec, x0, n_steps: int,
              r_div: float = DEFAULT_R_DIV, backend: Optional[str] = None,
              dm: Optional[DiscreteMultiplier] = None) -> Trajectory:
    """Apply ``spec`` ``n_steps`` times from ``x0``.

    The run stops early, keeping the partial trajectory, when a step fails
    or when ``max_i |x_i| > r_div``. The failure is stored on the returned
    trajectory (``error``, annotated with the step index) rather than raised.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.n,):
        raise ValueError(f"x0 must have length {system.n}")
    if spec.kind == "stormer_verlet":
        system.separable_split()
    if dm is None:
        dm = DiscreteMultiplier(system)
    ps = dm.packed(spec.fhat_form, spec.fhat_vars)
    k = _core.get_kernel(backend)
    (states, iters, resid, flags, status, fail_step, fail_x, fail_resid, fail_det) = k.integrate(
        ps, KINDS[spec.kind], x0, spec.tau, int(n_steps), *_newton_args(spec), float(r_div))
    traj = Trajectory(states, spec.tau, spec.kind, iters, resid, flags, r_div=r_div)
    if status == _core.STATUS_DIVERGED:
        traj.status, traj.failed_step = "diverged", int(fail_step)
    elif status != _core.STATUS_OK:
        traj.status, traj.failed_step = "step_failure", int(fail_step)
        x_last = states[-1]
        if status == _core.STATUS_NOT_CONVERGED:
            err = NotConverged(SolveResult(fail_x, spec.newton.max_iters, fail_resid, False), step=fail_step)
        elif status == _core.STATUS_MINOR_SINGULAR:
            err = MinorSingular(x_last, fail_x, fail_det, step=fail_step)
        else:
            err = SingularJacobian(fail_x, step=fail_step)
        traj.error = err
    return traj


def _fmt(v) -> str:
    return "%.17g" % v


def write_trajectory_csv(traj: Trajectory, system: ConservedSystem, path) -> None:
    """``k,t,x1..xn,psi_1..psi_m,newton_iters,residual`` with 17 significant digits."""
    n, m = system.n, system.m
    psi = system.psi_many(traj.states)
    header = (["k", "t"] + [f"x{i + 1}" for i in range(n)] + [f"psi_{i + 1}" for i in range(m)]
              + ["newton_iters", "residual"])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(traj.states)):
            row = [str(k), _fmt(k * traj.tau)]
            row += [_fmt(v) for v in traj.states[k]]
            row += [_fmt(v) for v in psi[k]]
            row += [str(int(traj.iterations[k])), _fmt(traj.residuals[k])]
            fh.write(",".join(row) + "\n")
