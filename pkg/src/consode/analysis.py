"""Drift accounting, accumulation-rate fits and elliptic level-set geometry."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DriftSeries",
    "AccumulationFit",
    "EllipticGeometry",
    "InsufficientData",
    "log_checkpoints",
    "drift_series",
    "fit_accumulation_rate",
    "n_max",
    "elliptic_geometry",
    "epsilon_to_merge",
    "exit_detector",
]


class InsufficientData(ValueError):
    pass


def _fmt(v) -> str:
    return "%.17g" % v


@dataclass(frozen=True)
class DriftSeries:
    """Running maximum of the conserved-quantity drift at checkpoints ``N``."""

    N: np.ndarray
    max_drift: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "N", np.asarray(self.N, dtype=np.int64))
        object.__setattr__(self, "max_drift", np.asarray(self.max_drift, dtype=float))
        if self.N.shape != self.max_drift.shape:
            raise ValueError("N and max_drift must have equal length")
        if np.any(np.diff(self.N) <= 0):
            raise ValueError("checkpoints must be strictly increasing")

    def __len__(self):
        return len(self.N)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("N,max_drift\n")
            for n, d in zip(self.N, self.max_drift):
                fh.write(f"{int(n)},{_fmt(d)}\n")

    @classmethod
    def from_csv(cls, path) -> "DriftSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["N"]) for r in rows], [float(r["max_drift"]) for r in rows])


@dataclass(frozen=True)
class AccumulationFit:
    """``max_drift(N) ~ C_a * N**s`` fitted on log-log axes."""

    C_a: float
    s: float
    r_squared: float
    n_points: int

    @property
    def sublinear(self) -> bool:
        return 0.0 < self.s <= 1.0

    def predict(self, N) -> np.ndarray:
        return self.C_a * np.asarray(N, dtype=float) ** self.s

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("C_a,s,r_squared,n_points\n")
            fh.write(f"{_fmt(self.C_a)},{_fmt(self.s)},{_fmt(self.r_squared)},{self.n_points}\n")

    @classmethod
    def from_csv(cls, path) -> "AccumulationFit":
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        return cls(float(row["C_a"]), float(row["s"]), float(row["r_squared"]), int(row["n_points"]))


def log_checkpoints(n_total: int, per_decade: int = 10) -> np.ndarray:
    """Distinct integers ``round(10**(i / per_decade))`` up to ``n_total`` (always included)."""
    if n_total < 1:
        raise ValueError("n_total must be positive")
    top = math.log10(n_total) * per_decade
    pts = np.round(10.0 ** (np.arange(0, math.floor(top + 1e-9) + 1) / per_decade)).astype(np.int64)
    pts = pts[pts <= n_total]
    return np.unique(np.append(pts, n_total))


def _psi_matrix(states, psi) -> np.ndarray:
    if hasattr(psi, "psi_many"):
        return psi.psi_many(states)
    return np.column_stack([p.evaluate_many(states) for p in psi])


def drift_series(trajectory, psi, checkpoints: Optional[Sequence[int]] = None) -> DriftSeries:
    """Running ``max_{1<=k<=N} ||psi(x_k) - psi(x_0)||_inf`` sampled at ``checkpoints``.

    ``trajectory`` is a :class:`~consode.integrators.Trajectory` or an array of
    states; ``psi`` a :class:`ConservedSystem` or a sequence of polynomials.
    Checkpoints beyond the last stored step are dropped; the default is
    :func:`log_checkpoints` of the trajectory length.
    """
    states = np.asarray(getattr(trajectory, "states", trajectory), dtype=float)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("trajectory must be a non-empty (k, n) array of states")
    vals = _psi_matrix(states, psi)
    drift = np.abs(vals - vals[0]).max(axis=1)
    running = np.maximum.accumulate(drift)
    K = len(states) - 1
    if checkpoints is None:
        checkpoints = log_checkpoints(K) if K >= 1 else np.array([], dtype=np.int64)
    cp = np.asarray([int(c) for c in checkpoints if 1 <= int(c) <= K], dtype=np.int64)
    return DriftSeries(cp, running[cp])


def fit_accumulation_rate(series: DriftSeries) -> AccumulationFit:
    """Ordinary least squares of ``log max_drift`` on ``log N``.

    Checkpoints with zero drift carry no information on a log scale and are
    skipped.

    Raises
    ------
    InsufficientData
        If fewer than three checkpoints have positive drift.
    """
    mask = series.max_drift > 0
    N = series.N[mask].astype(float)
    E = series.max_drift[mask]
    if len(N) < 3:
        raise InsufficientData(f"need at least 3 checkpoints with positive drift, have {len(N)}")
    x = np.log(N)
    y = np.log(E)
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise InsufficientData("checkpoints must span more than one N")
    s = float(dx @ dy) / sxx
    intercept = ym - s * xm
    res = y - (intercept + s * x)
    sst = float(dy @ dy)
    r2 = 1.0 if sst == 0.0 else 1.0 - float(res @ res) / sst
    return AccumulationFit(math.exp(intercept), s, r2, int(len(N)))


def n_max(epsilon: float, fit: AccumulationFit) -> float:
    """Step horizon ``(epsilon / (4 C_a)) ** (1 / s)`` within which the drift stays below ``epsilon / 4``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not (fit.C_a > 0 and fit.s > 0):
        raise ValueError("fit must have C_a > 0 and s > 0")
    return (epsilon / (4.0 * fit.C_a)) ** (1.0 / fit.s)


@dataclass(frozen=True)
class EllipticGeometry:
    """Level set ``y**2 = x**3 + a x + b``.

    With a negative discriminant the curve has a bounded oval over
    ``[x1, x2]`` and an unbounded branch starting at ``x3``.
    """

    a: float
    b: float
    discriminant: float
    real_roots: tuple
    component_count: int

    @property
    def oval_interval(self) -> Optional[tuple]:
        if self.component_count != 2:
            return None
        return (self.real_roots[0], self.real_roots[1])

    @property
    def gap(self) -> Optional[float]:
        if self.component_count != 2:
            return None
        return self.real_roots[2] - self.real_roots[1]

    @property
    def exit_threshold(self) -> Optional[float]:
        if self.component_count != 2:
            return None
        return 0.5 * (self.real_roots[1] + self.real_roots[2])

    def cubic(self, x):
        return x * x * x + self.a * x + self.b

    def to_row(self) -> dict:
        roots = list(self.real_roots) + [math.nan] * (3 - len(self.real_roots))
        oval = self.oval_interval or (math.nan, math.nan)
        try:
            eps = epsilon_to_merge(self.a, self.b)
        except ValueError:
            eps = math.nan
        return {
            "a": self.a, "b": self.b, "discriminant": self.discriminant,
            "component_count": self.component_count,
            "root_1": roots[0], "root_2": roots[1], "root_3": roots[2],
            "oval_lo": oval[0], "oval_hi": oval[1],
            "gap": math.nan if self.gap is None else self.gap,
            "epsilon_merge": eps,
        }


def _polish(x: float, a: float, b: float) -> float:
    d = 3.0 * x * x + a
    if d == 0.0:
        return x
    return x - (x * x * x + a * x + b) / d


def elliptic_geometry(a: float, b: float) -> EllipticGeometry:
    """Discriminant, real roots and component count of ``y**2 = x**3 + a x + b``."""
    a, b = float(a), float(b)
    disc = 4.0 * a ** 3 + 27.0 * b ** 2
    if disc < 0:
        # three distinct real roots (a < 0 here)
        r = 2.0 * math.sqrt(-a / 3.0)
        arg = (3.0 * b / (2.0 * a)) * math.sqrt(-3.0 / a)
        theta = math.acos(max(-1.0, min(1.0, arg))) / 3.0
        roots = [r * math.cos(theta - 2.0 * math.pi * k / 3.0) for k in range(3)]
    elif disc > 0:
        if a == 0.0:
            roots = [-math.copysign(abs(b) ** (1.0 / 3.0), b)]
        elif a < 0:
            arg = (-3.0 * abs(b) / (2.0 * a)) * math.sqrt(-3.0 / a)
            roots = [-2.0 * math.copysign(1.0, b) * math.sqrt(-a / 3.0)
                     * math.cosh(math.acosh(max(1.0, arg)) / 3.0)]
        else:
            arg = (3.0 * b / (2.0 * a)) * math.sqrt(3.0 / a)
            roots = [-2.0 * math.sqrt(a / 3.0) * math.sinh(math.asinh(arg) / 3.0)]
    else:
        if a == 0.0:
            roots = [0.0, 0.0, 0.0]
        else:
            roots = [3.0 * b / a, -1.5 * b / a, -1.5 * b / a]
    roots = tuple(sorted(_polish(x, a, b) for x in roots))
    return EllipticGeometry(a, b, disc, roots, 2 if disc < 0 else 1)


def epsilon_to_merge(a: float, b: float) -> float:
    """Smallest level shift at which the oval and the unbounded branch touch.

    The components merge where the discriminant vanishes, at levels
    ``+-sqrt(-4 a**3 / 27)``.

    Raises
    ------
    ValueError
        If the level set has a single component (positive discriminant).
    """
    a, b = float(a), float(b)
    if not a < 0:
        raise ValueError("two components need a < 0")
    edge = math.sqrt(-4.0 * a ** 3 / 27.0)
    if abs(b) > edge:
        raise ValueError(f"discriminant {4 * a ** 3 + 27 * b ** 2:.3e} > 0: single component")
    return edge - abs(b)


def exit_detector(geometry: EllipticGeometry, trajectory, r_div: Optional[float] = None) -> Optional[int]:
    """First step whose x-coordinate passes the midpoint between oval and branch.

    Also flags steps with ``max |x_i| > r_div`` or non-finite entries. Returns
    ``None`` when the trajectory stays on the oval side.
    """
    if geometry.component_count != 2:
        raise ValueError("exit detection needs a level set with two components")
    states = np.asarray(getattr(trajectory, "states", trajectory), dtype=float)
    if r_div is None:
        r_div = getattr(trajectory, "r_div", math.inf)
    lo, hi = geometry.oval_interval
    slack = 1e-9 * (1.0 + abs(lo) + abs(hi))
    if not lo - slack <= states[0, 0] <= hi + slack:
        raise ValueError(f"initial x {states[0, 0]} lies outside the oval [{lo}, {hi}]")
    bad = (states[:, 0] > geometry.exit_threshold) | ~(np.abs(states).max(axis=1) <= r_div)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None
