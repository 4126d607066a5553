"""Stepping kernels.

Two implementations share one interface: ``_ckernel`` (Cython, built when a
C compiler is available) and ``_pykernel`` (pure Python). They perform the
same floating-point operations in the same order and so produce
bit-identical trajectories. The compiled one is used when importable; set
``CONSODE_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _pykernel

KINDS = {
    "conservative_multiplier": 0,
    "explicit_euler": 1,
    "backward_euler": 2,
    "stormer_verlet": 3,
    "implicit_midpoint": 4,
}
FHAT_FORMS = {"polarized": 0, "average": 1, "midpoint": 2}

STATUS_OK = 0
STATUS_NOT_CONVERGED = 1
STATUS_MINOR_SINGULAR = 2
STATUS_SINGULAR_JACOBIAN = 3
STATUS_DIVERGED = 4


@dataclass(frozen=True, eq=False)
class PackedSystem:
    n: int
    m: int
    half: int
    mode: int
    perm: np.ndarray
    f_coef: np.ndarray
    f_exp: np.ndarray
    f_off: np.ndarray
    psi_coef: np.ndarray
    psi_exp: np.ndarray
    psi_off: np.ndarray
    fh_coef: np.ndarray
    fh_exp: np.ndarray
    fh_off: np.ndarray
    fh_var: np.ndarray


def _pack_block(polys, n):
    coef, exps, off = [], [], [0]
    for p in polys:
        for a, c in p.terms:
            coef.append(c)
            exps.append(a)
        off.append(len(coef))
    return (np.array(coef, dtype=np.float64),
            np.array(exps, dtype=np.int32).reshape(-1, n),
            np.array(off, dtype=np.int64))


def pack_system(system, fhat_form="polarized", fhat_vars=None) -> PackedSystem:
    """Flatten a :class:`ConservedSystem` for the kernels.

    In the ``polarized`` form, component ``c`` of the directly discretised
    part of ``f`` is replaced by the divided difference, in its designated
    variable, of its antiderivative in that variable. The designated variable
    defaults to the first minor column.
    """
    if fhat_form not in FHAT_FORMS:
        raise ValueError(f"unknown fhat form {fhat_form!r}")
    n, m = system.n, system.m
    part = list(system.partition)
    fhat = [system.f[j] for j in part[m:]]
    if fhat_vars is None:
        fhat_vars = [part[0]] * (n - m)
    fhat_vars = [int(v) for v in fhat_vars]
    if len(fhat_vars) != n - m or not all(0 <= v < n for v in fhat_vars):
        raise ValueError("fhat_vars needs one variable index in range per discretised component")
    if fhat_form == "polarized":
        fhat = [p.antiderivative(v) for p, v in zip(fhat, fhat_vars)]
    try:
        half = system.separable_split()
    except ValueError:
        half = -1
    f = _pack_block(system.f, n)
    psi = _pack_block(system.psi, n)
    fh = _pack_block(fhat, n)
    return PackedSystem(n, m, half, FHAT_FORMS[fhat_form], np.array(part, dtype=np.int32),
                        *f, *psi, *fh, np.array(fhat_vars, dtype=np.int32))


def _select():
    want = os.environ.get("CONSODE_BACKEND", "").lower()
    if want == "python":
        return _pykernel, "python"
    try:
        from . import _ckernel
    except ImportError:
        if want == "cython":
            raise
        return _pykernel, "python"
    return _ckernel, "cython"


kernel, BACKEND = _select()


def get_kernel(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return kernel
    if name == "python":
        return _pykernel
    if name == "cython":
        from . import _ckernel
        return _ckernel
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        from . import _ckernel  # noqa: F401
        out.insert(0, "cython")
    except ImportError:
        pass
    return out
