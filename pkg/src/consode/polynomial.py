"""Sparse multivariate polynomials with real coefficients.

Terms are stored in graded-lexicographic order (highest degree first) and
every evaluation walks them in that order, with integer powers formed by
repeated multiplication. Two evaluations of the same polynomial at the same
point therefore round identically, which the compiled kernels rely on to
reproduce the pure-Python results bit for bit.
"""
from __future__ import annotations

import math
import re
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Polynomial",
    "PolynomialParseError",
    "evaluate",
    "gradient",
    "forward_difference_factor",
    "ipow",
]

MultiIndex = tuple


class PolynomialParseError(ValueError):
    """Raised for malformed polynomial text."""


def ipow(v: float, e: int) -> float:
    """``v**e`` by repeated multiplication (``e >= 0``)."""
    if e == 0:
        return 1.0
    r = v
    for _ in range(e - 1):
        r *= v
    return r


def _grlex_key(alpha: tuple) -> tuple:
    return (sum(alpha), alpha)


class Polynomial:
    """Immutable sparse polynomial in ``n_vars`` real variables.

    Parameters
    ----------
    n_vars : int
        Number of variables.
    terms : mapping or iterable of (multi-index, coefficient)
        Repeated multi-indices are summed. Terms whose coefficient is exactly
        zero are dropped.
    """

    __slots__ = ("_n", "_terms", "_hash")

    def __init__(self, n_vars: int, terms=()):
        if n_vars < 1:
            raise ValueError("n_vars must be positive")
        items = terms.items() if isinstance(terms, Mapping) else terms
        acc: dict[tuple, float] = {}
        for alpha, c in items:
            alpha = tuple(int(e) for e in alpha)
            if len(alpha) != n_vars:
                raise ValueError(
                    f"multi-index {alpha} has length {len(alpha)}, expected {n_vars}")
            if any(e < 0 for e in alpha):
                raise ValueError(f"negative exponent in {alpha}")
            c = float(c)
            if not math.isfinite(c):
                raise ValueError(f"non-finite coefficient {c}")
            acc[alpha] = acc.get(alpha, 0.0) + c
        ordered = sorted(
            ((a, c) for a, c in acc.items() if c != 0.0),
            key=lambda t: _grlex_key(t[0]),
            reverse=True,
        )
        self._n = n_vars
        self._terms = tuple(ordered)
        self._hash = None

    # construction helpers -------------------------------------------------

    @classmethod
    def constant(cls, n_vars: int, c: float) -> "Polynomial":
        return cls(n_vars, [((0,) * n_vars, c)])

    @classmethod
    def variable(cls, n_vars: int, j: int) -> "Polynomial":
        alpha = [0] * n_vars
        alpha[j] = 1
        return cls(n_vars, [(tuple(alpha), 1.0)])

    @classmethod
    def zero(cls, n_vars: int) -> "Polynomial":
        return cls(n_vars)

    # basic protocol --------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return self._n

    @property
    def terms(self) -> tuple:
        """``((alpha, c), ...)`` in canonical order."""
        return self._terms

    def as_dict(self) -> dict:
        return dict(self._terms)

    @property
    def degree(self) -> int:
        """Total degree; ``-1`` for the zero polynomial."""
        return max((sum(a) for a, _ in self._terms), default=-1)

    def is_zero(self) -> bool:
        return not self._terms

    def depends_on(self, j: int) -> bool:
        return any(a[j] > 0 for a, _ in self._terms)

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._n == other._n and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self._n, self._terms))
        return self._hash

    def __repr__(self):
        return f"Polynomial({self._n}, {self.to_string()!r})"

    def __str__(self):
        return self.to_string()

    # arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other._n != self._n:
                raise ValueError("polynomials have different numbers of variables")
            return other
        return Polynomial.constant(self._n, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        return Polynomial(self._n, self._terms + other._terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self._n, [(a, -c) for a, c in self._terms])

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = []
        for a, c in self._terms:
            for b, d in other._terms:
                out.append((tuple(x + y for x, y in zip(a, b)), c * d))
        return Polynomial(self._n, out)

    __rmul__ = __mul__

    def __pow__(self, e: int):
        if e < 0:
            raise ValueError("negative power")
        r = Polynomial.constant(self._n, 1.0)
        for _ in range(e):
            r = r * self
        return r

    # calculus -------------------------------------------------------------

    def derivative(self, j: int) -> "Polynomial":
        out = []
        for a, c in self._terms:
            if a[j]:
                b = list(a)
                b[j] -= 1
                out.append((tuple(b), c * a[j]))
        return Polynomial(self._n, out)

    def gradient(self) -> tuple:
        return tuple(self.derivative(j) for j in range(self._n))

    def antiderivative(self, j: int) -> "Polynomial":
        """Antiderivative in variable ``j`` with zero integration constant."""
        out = []
        for a, c in self._terms:
            b = list(a)
            b[j] += 1
            out.append((tuple(b), c / b[j]))
        return Polynomial(self._n, out)

    # evaluation -----------------------------------------------------------

    def _check_point(self, x) -> Sequence[float]:
        if len(x) != self._n:
            raise ValueError(f"point has length {len(x)}, expected {self._n}")
        return [float(v) for v in x]

    def evaluate(self, x) -> float:
        x = self._check_point(x)
        acc = 0.0
        for a, c in self._terms:
            t = c
            for r, e in enumerate(a):
                if e:
                    t *= ipow(x[r], e)
            acc += t
        return acc

    __call__ = evaluate

    def evaluate_many(self, points) -> np.ndarray:
        """Evaluate at each row of ``points``; rounds exactly like :meth:`evaluate`."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self._n:
            raise ValueError(f"points must have shape (k, {self._n})")
        acc = np.zeros(pts.shape[0])
        for a, c in self._terms:
            t = np.full(pts.shape[0], c)
            for r, e in enumerate(a):
                if e:
                    col = pts[:, r]
                    p = col.copy()
                    for _ in range(e - 1):
                        p *= col
                    t *= p
            acc += t
        return acc

    def forward_difference_factor(self, j: int, x_prev, x_next) -> float:
        """Divided-difference factor of variable ``j`` between two points.

        Variables before ``j`` are taken at ``x_prev`` and variables after
        ``j`` at ``x_next``, so that summing ``factor_j * (x_next[j] - x_prev[j])``
        over ``j`` telescopes to ``p(x_next) - p(x_prev)``.
        """
        xp = self._check_point(x_prev)
        xn = self._check_point(x_next)
        if not 0 <= j < self._n:
            raise IndexError(f"variable index {j} out of range")
        acc = 0.0
        for a, c in self._terms:
            e = a[j]
            if not e:
                continue
            g = 0.0
            for l in range(e):
                g += ipow(xn[j], l) * ipow(xp[j], e - l - 1)
            t = c * g
            for r in range(self._n):
                if r != j and a[r]:
                    t *= ipow(xp[r] if r < j else xn[r], a[r])
            acc += t
        return acc

    # text format ----------------------------------------------------------

    def to_string(self, names: Sequence[str] | None = None) -> str:
        names = _default_names(self._n) if names is None else list(names)
        if not self._terms:
            return "0"
        parts = []
        for i, (a, c) in enumerate(self._terms):
            mono = [names[r] if e == 1 else f"{names[r]}^{e}" for r, e in enumerate(a) if e]
            mag = abs(c)
            if mono and mag == 1.0:
                body = " * ".join(mono)
            else:
                body = " * ".join([repr(mag)] + mono)
            if i == 0:
                parts.append(("-" if c < 0 else "") + body)
            else:
                parts.append((" - " if c < 0 else " + ") + body)
        return "".join(parts)

    @classmethod
    def parse(cls, text: str, names: Sequence[str] | None = None,
              params: Mapping[str, float] | None = None,
              n_vars: int | None = None) -> "Polynomial":
        """Parse ``c * x1^e1 * ... + ...``.

        ``names`` lists the variable names (default ``x1..xn`` with ``n`` taken
        from ``n_vars``). Identifiers found in ``params`` are numeric constants
        and may carry a non-negative integer power too.
        """
        if names is None:
            if n_vars is None:
                raise ValueError("either names or n_vars is required")
            names = _default_names(n_vars)
        names = list(names)
        index = {nm: r for r, nm in enumerate(names)}
        params = dict(params or {})
        clash = set(index) & set(params)
        if clash:
            raise PolynomialParseError(f"names used as both variable and parameter: {sorted(clash)}")
        return cls(len(names), _Parser(text, index, params).parse())


def _default_names(n: int) -> list:
    return [f"x{r + 1}" for r in range(n)]


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*^]))")


class _Parser:
    def __init__(self, text, index, params):
        self.text = text
        self.index = index
        self.params = params
        self.toks = self._lex(text)
        self.i = 0

    def _lex(self, text):
        toks, pos = [], 0
        stripped = text.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            if not m or m.end() == pos:
                raise PolynomialParseError(f"unexpected character at {pos}: {text[pos:pos + 10]!r}")
            kind = m.lastgroup
            val = m.group(kind)
            toks.append((kind, "^" if val == "**" else val, m.start(kind)))
            pos = m.end()
        return toks

    def _peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, len(self.text))

    def _next(self):
        tok = self._peek()
        self.i += 1
        return tok

    def parse(self):
        if not self.toks:
            raise PolynomialParseError("empty polynomial")
        terms = []
        sign = 1.0
        kind, val, _ = self._peek()
        if kind == "op" and val in "+-":
            self._next()
            sign = -1.0 if val == "-" else 1.0
        terms.append(self._term(sign))
        while self.i < len(self.toks):
            kind, val, pos = self._next()
            if kind != "op" or val not in "+-":
                raise PolynomialParseError(f"expected '+' or '-' at {pos}")
            terms.append(self._term(-1.0 if val == "-" else 1.0))
        return terms

    def _term(self, sign):
        coef = sign
        alpha = [0] * len(self.index)
        while True:
            kind, val, pos = self._next()
            if kind == "num":
                coef *= float(val)
            elif kind == "name":
                power = self._power()
                if val in self.index:
                    alpha[self.index[val]] += power
                elif val in self.params:
                    coef *= ipow(float(self.params[val]), power)
                else:
                    raise PolynomialParseError(f"unknown identifier {val!r} at {pos}")
            else:
                raise PolynomialParseError(f"expected number or name at {pos}")
            kind, val, _ = self._peek()
            if kind == "op" and val == "*":
                self._next()
                continue
            return tuple(alpha), coef

    def _power(self):
        kind, val, _ = self._peek()
        if kind == "op" and val == "^":
            self._next()
            kind, val, pos = self._next()
            if kind != "num" or not val.isdigit():
                raise PolynomialParseError(f"exponent must be a non-negative integer at {pos}")
            return int(val)
        return 1


def evaluate(p: Polynomial, x) -> float:
    return p.evaluate(x)


def gradient(p: Polynomial) -> tuple:
    return p.gradient()


def forward_difference_factor(p: Polynomial, j: int, x_prev, x_next) -> float:
    return p.forward_difference_factor(j, x_prev, x_next)
