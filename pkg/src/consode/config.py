"""Flat ``key = value`` files for systems and experiments.

A system file declares the ODE::

    family = elliptic
    vars = x y
    n = 2
    m = 1
    param a = -1
    f1 = 2*y
    f2 = 3*x^2 + a
    psi1 = y^2 - x^3 - a*x
    partition = 1 2

An experiment file pulls a system in with ``include = <path>`` (relative to
the experiment file) and sets the stepper, initial state and outputs. Keys
prefixed ``result.`` are written into manifests and ignored on reading, so a
manifest is itself a runnable experiment file.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .integrators import DEFAULT_R_DIV, StepperSpec
from .multiplier import ConservedSystem
from .polynomial import Polynomial, PolynomialParseError
from .solver import NewtonConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_system", "load_config", "parse_config_text",
           "write_manifest", "resolve_path", "OUTPUT_ENV"]

OUTPUT_ENV = "CONSODE_OUTPUT_DIR"

EXPERIMENT_KEYS = {
    "include", "name", "method", "tau", "steps", "initial", "initial_x", "level",
    "abs_tol", "max_iters", "fd_step", "damping", "stall_factor", "fhat", "fhat_vars",
    "checkpoints", "output", "r_div",
}


class ConfigError(ValueError):
    def __init__(self, msg, path=None, line=None):
        self.path, self.line = path, line
        loc = "" if path is None else f"{path}:" + ("" if line is None else f"{line}:")
        super().__init__(f"{loc} {msg}" if loc else msg)


def parse_config_text(text: str, path=None):
    """``(entries, params)`` where ``entries`` maps key to ``(value, line)``."""
    entries, params = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key.startswith("param "):
            name = key[6:].strip()
            try:
                params[name] = (float(value), lineno)
            except ValueError:
                raise ConfigError(f"parameter {name} needs a number, got {value!r}", path, lineno) from None
            continue
        if key in entries:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        entries[key] = (value, lineno)
    return entries, params


def resolve_path(name, base: Optional[Path] = None) -> Path:
    """Find a file relative to ``base``, the working directory, or the bundled data."""
    p = Path(name)
    candidates = [p] if p.is_absolute() else ([base / p] if base else []) + [p]
    for c in candidates:
        if c.is_file():
            return c.resolve()
    bundled = resources.files("consode") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(name)


def load_system(path, param_overrides: Optional[dict] = None) -> ConservedSystem:
    try:
        path = resolve_path(path)
    except FileNotFoundError:
        raise ConfigError("system file not found", path) from None
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read system file: {exc}", path) from None
    entries, params = parse_config_text(text, path)
    return system_from_entries(entries, {k: v for k, (v, _) in params.items()} | dict(param_overrides or {}),
                               path)


def system_from_entries(entries, params, path=None) -> ConservedSystem:
    def get(key, required=True):
        if key not in entries:
            if required:
                raise ConfigError(f"missing key {key!r}", path)
            return None, None
        return entries[key]

    names_s, _ = get("vars", required=False)
    fkeys = sorted((k for k in entries if k[0] == "f" and k[1:].isdigit()), key=lambda k: int(k[1:]))
    pkeys = sorted((k for k in entries if k.startswith("psi") and k[3:].isdigit()), key=lambda k: int(k[3:]))
    n = len(fkeys)
    if n == 0:
        raise ConfigError("no right-hand side components f1..fn", path)
    if [int(k[1:]) for k in fkeys] != list(range(1, n + 1)):
        raise ConfigError("f components must be numbered f1..fn without gaps", path)
    if [int(k[3:]) for k in pkeys] != list(range(1, len(pkeys) + 1)):
        raise ConfigError("conserved quantities must be numbered psi1..psim without gaps", path)
    names = names_s.split() if names_s else [f"x{i + 1}" for i in range(n)]
    if len(names) != n:
        raise ConfigError(f"vars lists {len(names)} names for {n} components", path, entries["vars"][1])
    for key, want in (("n", n), ("m", len(pkeys))):
        if key in entries:
            v, ln = entries[key]
            if v != str(want):
                raise ConfigError(f"{key} = {v} but {want} components are given", path, ln)

    def poly(key):
        text, ln = entries[key]
        try:
            return Polynomial.parse(text, names, params)
        except PolynomialParseError as exc:
            raise ConfigError(f"{key}: {exc}", path, ln) from None

    part = None
    if "partition" in entries:
        v, ln = entries["partition"]
        try:
            part = tuple(int(t) - 1 for t in v.split())
        except ValueError:
            raise ConfigError("partition must list 1-based variable indices", path, ln) from None
    family = entries.get("family", (None, None))[0]
    try:
        return ConservedSystem(tuple(poly(k) for k in fkeys), tuple(poly(k) for k in pkeys),
                               part, tuple(names), params, family)
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None


@dataclass
class ExperimentConfig:
    path: Optional[Path]
    system_path: Path
    system: ConservedSystem
    spec: StepperSpec
    x0: np.ndarray
    steps: int
    checkpoints: str = "log10"
    output: Path = Path("runs")
    r_div: float = DEFAULT_R_DIV
    name: str = ""
    level: Optional[float] = None
    param_overrides: dict = field(default_factory=dict)

    def checkpoint_values(self, n_total: int) -> np.ndarray:
        from .analysis import log_checkpoints

        spec = self.checkpoints.strip()
        if spec.startswith("log"):
            per = spec[3:].lstrip(":") or "10"
            per = 10 if per == "10" else int(per)
            return log_checkpoints(n_total, per)
        vals = np.array(sorted({int(t) for t in spec.replace(",", " ").split()}), dtype=np.int64)
        return vals[(vals >= 1) & (vals <= n_total)]


def _num(entries, key, cast, default, path, positive=True):
    if key not in entries:
        return default
    v, ln = entries[key]
    try:
        out = cast(v)
    except ValueError:
        raise ConfigError(f"{key} must be a {cast.__name__}, got {v!r}", path, ln) from None
    if positive and not out > 0:
        raise ConfigError(f"{key} must be positive, got {v}", path, ln)
    return out


def load_config(path, overrides: Optional[dict] = None, output: Optional[str] = None) -> ExperimentConfig:
    """Read an experiment file. ``overrides`` replace keys (``param NAME`` included);
    ``output`` (else ``$CONSODE_OUTPUT_DIR``) replaces the output directory."""
    try:
        path = resolve_path(path)
    except FileNotFoundError:
        raise ConfigError("config file not found", path) from None
    entries, params = parse_config_text(path.read_text(), path)
    for k, v in (overrides or {}).items():
        if k.startswith("param "):
            try:
                params[k[6:].strip()] = (float(v), None)
            except ValueError:
                raise ConfigError(f"override {k} needs a number") from None
        else:
            entries[k] = (str(v), None)
    for k in entries:
        if k not in EXPERIMENT_KEYS and not k.startswith("result."):
            raise ConfigError(f"unknown key {k!r}", path, entries[k][1])
    if "include" not in entries:
        raise ConfigError("missing 'include = <system file>'", path)
    inc, ln = entries["include"]
    try:
        sys_path = resolve_path(inc, path.parent)
    except FileNotFoundError:
        raise ConfigError(f"system file {inc!r} not found", path, ln) from None
    param_over = {k: v for k, (v, _) in params.items()}
    system = load_system(sys_path, param_over)

    if "method" not in entries:
        raise ConfigError("missing key 'method'", path)
    steps = _num(entries, "steps", int, None, path)
    if steps is None:
        raise ConfigError("missing key 'steps'", path)
    tau = _num(entries, "tau", float, None, path)
    if tau is None:
        raise ConfigError("missing key 'tau'", path)
    try:
        newton = NewtonConfig(
            abs_tol=_num(entries, "abs_tol", float, 5e-16, path),
            max_iters=_num(entries, "max_iters", int, 50, path),
            fd_step=_num(entries, "fd_step", float, 1e-7, path),
            damping=_num(entries, "damping", float, 0.5, path),
            stall_factor=_num(entries, "stall_factor", float, 4.0, path),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"newton settings: {exc}", path) from None
    fhat_vars = None
    if "fhat_vars" in entries:
        v, ln = entries["fhat_vars"]
        try:
            fhat_vars = tuple(int(t) - 1 for t in v.split())
        except ValueError:
            raise ConfigError("fhat_vars must list 1-based variable indices", path, ln) from None
    try:
        spec = StepperSpec(entries["method"][0], tau, newton,
                           entries.get("fhat", ("polarized", None))[0], fhat_vars)
    except ValueError as exc:
        raise ConfigError(str(exc), path, entries["method"][1]) from None

    level = _num(entries, "level", float, None, path, positive=False)
    x0 = _initial_state(entries, system, level, path)
    out = output or os.environ.get(OUTPUT_ENV) or entries.get("output", ("runs/" + path.stem, None))[0]
    return ExperimentConfig(
        path=path, system_path=sys_path, system=system, spec=spec, x0=x0, steps=steps,
        checkpoints=entries.get("checkpoints", ("log10", None))[0], output=Path(out),
        r_div=_num(entries, "r_div", float, DEFAULT_R_DIV, path),
        name=entries.get("name", (path.stem, None))[0], level=level,
        param_overrides=param_over)


def _initial_state(entries, system, level, path):
    n = system.n
    if "initial" in entries:
        v, ln = entries["initial"]
        try:
            x0 = np.array([float(t) for t in v.split()])
        except ValueError:
            raise ConfigError("initial must list numbers", path, ln) from None
        if x0.shape != (n,):
            raise ConfigError(f"initial needs {n} values", path, ln)
        return x0
    if "initial_x" in entries:
        v, ln = entries["initial_x"]
        if system.family != "elliptic":
            raise ConfigError("initial_x needs an elliptic-family system", path, ln)
        if level is None:
            raise ConfigError("initial_x needs 'level' (y0 = sqrt(x0^3 + a x0 + level))", path, ln)
        x = float(v)
        a = system.params.get("a")
        if a is None:
            raise ConfigError("elliptic system must define 'param a'", path, ln)
        rad = x * x * x + a * x + level
        if rad < 0:
            raise ConfigError(f"x0 = {x} is not on the level set (x^3 + a x + level < 0)", path, ln)
        return np.array([x, math.sqrt(rad)])
    raise ConfigError("missing initial state ('initial' or 'initial_x' + 'level')", path)


def write_manifest(cfg: ExperimentConfig, path, results: dict) -> None:
    """Resolved configuration plus ``result.*`` lines; re-runnable as a config."""
    spec, nc = cfg.spec, cfg.spec.newton
    lines = [
        "# resolved experiment configuration",
        f"include = {cfg.system_path}",
        f"name = {cfg.name}",
        f"method = {spec.kind}",
        f"tau = {spec.tau!r}",
        f"steps = {cfg.steps}",
        "initial = " + " ".join(repr(float(v)) for v in cfg.x0),
    ]
    if cfg.level is not None:
        lines.append(f"level = {cfg.level!r}")
    for k, v in sorted(cfg.param_overrides.items()):
        lines.append(f"param {k} = {v!r}")
    lines += [
        f"abs_tol = {nc.abs_tol!r}",
        f"max_iters = {nc.max_iters}",
        f"fd_step = {nc.fd_step!r}",
        f"damping = {nc.damping!r}",
        f"stall_factor = {nc.stall_factor!r}",
        f"fhat = {spec.fhat_form}",
    ]
    if spec.fhat_vars is not None:
        lines.append("fhat_vars = " + " ".join(str(v + 1) for v in spec.fhat_vars))
    lines += [
        f"checkpoints = {cfg.checkpoints}",
        f"r_div = {cfg.r_div!r}",
        f"output = {cfg.output}",
    ]
    lines += [f"result.{k} = {v}" for k, v in results.items()]
    Path(path).write_text("\n".join(lines) + "\n")
