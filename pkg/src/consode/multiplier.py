"""Conserved systems and their continuous and discrete multipliers.

For polynomial conserved quantities ``psi`` the continuous multiplier is the
Jacobian of ``psi``. The discrete multiplier evaluates, entry by entry, the
divided-difference factors of :meth:`Polynomial.forward_difference_factor`,
so that ``Lambda_tau(x, x') @ (x' - x) == psi(x') - psi(x)`` exactly in real
arithmetic and ``Lambda_tau(y, y)`` reduces to the Jacobian at ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .polynomial import Polynomial
from .solver import lu_factor

__all__ = [
    "ConservedSystem",
    "DiscreteMultiplier",
    "MinorSingular",
    "MultiplierReport",
    "continuous_multiplier",
    "verify_multiplier",
    "discrete_multiplier_eval",
    "partition_minor",
    "SINGULAR_RTOL",
]

SINGULAR_RTOL = 1e-12


class MinorSingular(ArithmeticError):
    """The selected ``m x m`` minor of the discrete multiplier is singular."""

    def __init__(self, x_prev, x_next, det: float, step: Optional[int] = None):
        self.x_prev = np.asarray(x_prev, dtype=float)
        self.x_next = np.asarray(x_next, dtype=float)
        self.det = det
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"singular multiplier minor{where} (det={det:.3e}) between "
            f"{self.x_prev.tolist()} and {self.x_next.tolist()}")


@dataclass(frozen=True)
class ConservedSystem:
    """Autonomous polynomial ODE ``x' = f(x)`` with conserved quantities ``psi``.

    ``partition`` is a permutation of ``range(n)``; its first ``m`` entries
    pick the columns of the invertible minor, the remaining ones the
    components of ``f`` that are discretised directly.
    """

    f: tuple
    psi: tuple
    partition: Optional[tuple] = None
    names: Optional[tuple] = None
    params: Mapping[str, float] = field(default_factory=dict)
    family: Optional[str] = None

    def __post_init__(self):
        f = tuple(self.f)
        psi = tuple(self.psi)
        if not f:
            raise ValueError("f must have at least one component")
        n = len(f)
        for p in f + psi:
            if not isinstance(p, Polynomial):
                raise TypeError("f and psi components must be Polynomial")
            if p.n_vars != n:
                raise ValueError(f"polynomial has {p.n_vars} variables, system has {n}")
        m = len(psi)
        if not 1 <= m <= n - 1:
            raise ValueError(f"need 1 <= m <= n-1 conserved quantities, got m={m}, n={n}")
        part = tuple(range(n)) if self.partition is None else tuple(int(i) for i in self.partition)
        if sorted(part) != list(range(n)):
            raise ValueError(f"partition {part} is not a permutation of 0..{n - 1}")
        names = tuple(f"x{i + 1}" for i in range(n)) if self.names is None else tuple(self.names)
        if len(names) != n:
            raise ValueError("names must have one entry per variable")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def m(self) -> int:
        return len(self.psi)

    def rhs(self, x) -> np.ndarray:
        return np.array([p.evaluate(x) for p in self.f])

    def psi_values(self, x) -> np.ndarray:
        return np.array([p.evaluate(x) for p in self.psi])

    def psi_many(self, states) -> np.ndarray:
        """``psi`` at every row of ``states``, shape ``(k, m)``."""
        return np.column_stack([p.evaluate_many(states) for p in self.psi])

    def separable_split(self) -> int:
        """Half-size ``h`` if ``f[:h]`` depends only on ``x[h:]`` and vice versa.

        Raises :class:`ValueError` for systems without that structure.
        """
        n = self.n
        if n % 2:
            raise ValueError("separable form needs an even state dimension")
        h = n // 2
        for i in range(h):
            if any(self.f[i].depends_on(j) for j in range(h)):
                raise ValueError(f"f[{i}] depends on the first half of the state")
            if any(self.f[h + i].depends_on(j) for j in range(h, n)):
                raise ValueError(f"f[{h + i}] depends on the second half of the state")
        return h

    def with_f(self, f) -> "ConservedSystem":
        return ConservedSystem(tuple(f), self.psi, self.partition, self.names, self.params, self.family)


def continuous_multiplier(system: ConservedSystem) -> tuple:
    """The ``m x n`` multiplier ``J_psi`` as a tuple of rows of polynomials."""
    return tuple(p.gradient() for p in system.psi)


def _eval_matrix(mat, x) -> np.ndarray:
    if callable(mat):
        return np.atleast_2d(np.asarray(mat(np.asarray(x, dtype=float)), dtype=float))
    return np.array([[p.evaluate(x) for p in row] for row in mat])


@dataclass(frozen=True)
class MultiplierReport:
    max_residual: float
    max_scaled_residual: float
    max_deviation: float
    worst_point: Optional[np.ndarray]
    tol: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.max_scaled_residual <= self.tol and self.max_deviation <= self.tol

    def lines(self) -> list:
        return [
            f"samples            {self.n_samples}",
            f"max |Lambda f|     {self.max_residual:.3e}",
            f"max scaled         {self.max_scaled_residual:.3e}",
            f"max |J_psi - L|    {self.max_deviation:.3e}",
            f"tol                {self.tol:.1e}",
            f"result             {'PASS' if self.passed else 'FAIL'}",
        ]


def verify_multiplier(system: ConservedSystem, sample_points: Iterable, tol: float = 1e-12,
                      multiplier=None) -> MultiplierReport:
    """Check ``Lambda(y) f(y) = 0`` at sample points.

    Residual entries are scaled by ``1 + sum_j |Lambda_ij(y) f_j(y)|`` so the
    check is insensitive to the magnitude of the state. When ``multiplier`` (a
    matrix of polynomials or a callable) is given, its deviation from
    ``J_psi`` is reported as well and ``multiplier`` is used for the residual.
    """
    jac = continuous_multiplier(system)
    lam = jac if multiplier is None else multiplier
    max_res = max_scaled = max_dev = 0.0
    worst = None
    count = 0
    for y in sample_points:
        y = np.asarray(y, dtype=float)
        count += 1
        L = _eval_matrix(lam, y)
        fy = system.rhs(y)
        prod = L * fy
        res = np.abs(prod.sum(axis=1))
        scaled = res / (1.0 + np.abs(prod).sum(axis=1))
        if res.max() > max_res:
            max_res = float(res.max())
        if scaled.max() > max_scaled:
            max_scaled = float(scaled.max())
            worst = y
        if multiplier is not None:
            dev = float(np.abs(_eval_matrix(jac, y) - L).max())
            max_dev = max(max_dev, dev)
    return MultiplierReport(max_res, max_scaled, max_dev, worst, tol, count)


class DiscreteMultiplier:
    """Two-point discrete multiplier ``Lambda_tau(x_prev, x_next)`` of a system.

    The factor table holds, for every conserved quantity ``i`` and variable
    ``j``, the terms of ``psi_i`` that involve ``x_j``; only those contribute
    to entry ``(i, j)``.
    """

    def __init__(self, system: ConservedSystem):
        self.system = system
        self.tables = tuple(
            tuple(Polynomial(system.n, [(a, c) for a, c in p.terms if a[j]]) for j in range(system.n))
            for p in system.psi)
        self._packed = {}

    def __call__(self, x_prev, x_next) -> np.ndarray:
        return discrete_multiplier_eval(self, x_prev, x_next)

    def packed(self, fhat_form: str = "polarized", fhat_vars=None):
        """Flat array form used by the compiled kernels (cached)."""
        from ._core import pack_system

        key = (fhat_form, None if fhat_vars is None else tuple(fhat_vars))
        if key not in self._packed:
            self._packed[key] = pack_system(self.system, fhat_form, fhat_vars)
        return self._packed[key]


def _check_len(x, n):
    if len(x) != n:
        raise ValueError(f"state has length {len(x)}, expected {n}")


def discrete_multiplier_eval(dm: DiscreteMultiplier, x_prev, x_next) -> np.ndarray:
    """The ``m x n`` matrix of divided-difference factors."""
    n = dm.system.n
    _check_len(x_prev, n)
    _check_len(x_next, n)
    return np.array([[tab[j].forward_difference_factor(j, x_prev, x_next) for j in range(n)]
                     for tab in dm.tables])


def singular_threshold(lam: np.ndarray) -> float:
    return SINGULAR_RTOL * (1.0 + float(np.abs(lam).sum(axis=1).max()))


def partition_minor(dm: DiscreteMultiplier, x_prev, x_next):
    """Split ``Lambda_tau`` into the square minor and the remaining columns.

    Returns ``(minor, rest, det)``.

    Raises
    ------
    MinorSingular
        When ``|det| < 1e-12 * (1 + max absolute row sum of Lambda_tau)``.
    """
    lam = discrete_multiplier_eval(dm, x_prev, x_next)
    m = dm.system.m
    part = list(dm.system.partition)
    minor = lam[:, part[:m]]
    rest = lam[:, part[m:]]
    try:
        lu, _, det = lu_factor(minor.tolist())
        for k in range(m):
            det *= lu[k][k]
    except ZeroDivisionError:
        det = 0.0
    if not abs(det) >= singular_threshold(lam):
        raise MinorSingular(x_prev, x_next, det)
    return minor, rest, det
