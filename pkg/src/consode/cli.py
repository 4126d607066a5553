"""Command-line experiment runner.

Subcommands::

    consode run <config> [--set key=value ...] [-o DIR]
    consode compare <config> <config> ... [-o table.csv]
    consode verify <system> [--samples N --box L --seed S --tol T]
    consode geometry --a A --b B

Exit codes: 0 ok, 1 verification failed, 2 configuration error, 3 step
failure, 4 divergence guard.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import _core
from .analysis import (InsufficientData, drift_series, elliptic_geometry, exit_detector,
                       fit_accumulation_rate, n_max)
from .config import ConfigError, ExperimentConfig, load_config, load_system, write_manifest
from .integrators import integrate, write_trajectory_csv
from .multiplier import verify_multiplier

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_STEP_FAILURE = 3
EXIT_DIVERGED = 4

STATUS_CODES = {"ok": EXIT_OK, "step_failure": EXIT_STEP_FAILURE, "diverged": EXIT_DIVERGED}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % v


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _level(cfg: ExperimentConfig) -> float:
    if cfg.level is not None:
        return cfg.level
    return float(cfg.system.psi_values(cfg.x0)[0])


def _geometry(cfg: ExperimentConfig):
    """Level-set geometry of an elliptic-family run, ``None`` otherwise."""
    if cfg.system.family != "elliptic" or "a" not in cfg.system.params:
        return None
    return elliptic_geometry(cfg.system.params["a"], _level(cfg))


def _exit_step(cfg, traj, geom):
    if geom is None or geom.component_count != 2:
        return None
    try:
        return exit_detector(geom, traj)
    except ValueError:
        return None


def execute(cfg: ExperimentConfig) -> tuple:
    """Integrate ``cfg``; return ``(trajectory, summary dict)`` without writing files."""
    traj = integrate(cfg.system, cfg.spec, cfg.x0, cfg.steps, r_div=cfg.r_div)
    geom = _geometry(cfg)
    psi = cfg.system.psi_many(traj.states)
    drift = np.abs(psi - psi[0]).max(axis=1) if len(psi) > 1 else np.zeros(1)
    implicit = traj.iterations[1:] if len(traj.iterations) > 1 else np.zeros(1, dtype=np.int64)
    summary = {
        "status": traj.status,
        "exit_code": STATUS_CODES[traj.status],
        "steps_completed": traj.n_steps,
        "failed_step": traj.failed_step,
        "max_drift": float(np.max(drift[np.isfinite(drift)], initial=0.0)),
        "exit_step": _exit_step(cfg, traj, geom),
        "newton_mean": float(np.mean(implicit)),
        "newton_max": int(np.max(implicit)),
        "floor_accepted": int(np.count_nonzero(traj.flags == 1)),
    }
    return traj, summary


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args.set), args.output)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    traj, summary = execute(cfg)
    write_trajectory_csv(traj, cfg.system, out / "trajectory.csv")

    cps = cfg.checkpoint_values(cfg.steps)
    series = drift_series(traj, cfg.system, cps)
    series.to_csv(out / "drift.csv")
    fit = None
    try:
        fit = fit_accumulation_rate(series)
    except InsufficientData:
        pass
    else:
        fit.to_csv(out / "fit.csv")

    geom = _geometry(cfg)
    if geom is not None:
        row = geom.to_row()
        row["exit_step"] = summary["exit_step"]
        eps = row["epsilon_merge"]
        row["n_max"] = n_max(eps, fit) if fit is not None and fit.C_a > 0 and fit.s > 0 and eps > 0 else None
        with open(out / "geometry.csv", "w", newline="") as fh:
            fh.write(",".join(row) + "\n")
            fh.write(",".join(_fmt(v) for v in row.values()) + "\n")

    results = dict(summary, backend=_core.BACKEND)
    if fit is not None:
        results.update(fit_C_a=fit.C_a, fit_s=fit.s)
    write_manifest(cfg, out / "manifest.cfg",
                   {k: v if isinstance(v, str) else _fmt(v) for k, v in results.items()})

    if traj.status == "step_failure":
        print(f"error: step {traj.failed_step} failed: {traj.error}", file=sys.stderr)
    elif traj.status == "diverged":
        print(f"error: divergence guard at step {traj.failed_step} (|x| > {cfg.r_div:g})", file=sys.stderr)
    print(f"{cfg.name}: {traj.status}, {traj.n_steps} steps, max drift {summary['max_drift']:.3e}, "
          f"exit step {_fmt(summary['exit_step'])} -> {out}")
    return summary["exit_code"]


COMPARE_COLUMNS = ["name", "method", "status", "steps_completed", "failed_step", "max_drift", "exit_step",
                   "newton_mean", "newton_max", "floor_accepted"]


def _same_problem(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    sa, sb = a.system, b.system
    return (sa.f == sb.f and sa.psi == sb.psi and sa.params == sb.params
            and np.array_equal(a.x0, b.x0))


def cmd_compare(args) -> int:
    cfgs = [load_config(p, _overrides(args.set)) for p in args.configs]
    for c in cfgs[1:]:
        if not _same_problem(cfgs[0], c):
            raise ConfigError(f"{c.path} does not share the system and initial state of {cfgs[0].path}")
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(execute, cfgs))
    n = cfgs[0].system.n
    header = COMPARE_COLUMNS + [f"final_x{i + 1}" for i in range(n)]
    lines = [",".join(header)]
    for cfg, (traj, s) in zip(cfgs, results):
        row = [cfg.name, cfg.spec.kind] + [s[k] if isinstance(s[k], str) else _fmt(s[k])
                                          for k in COMPARE_COLUMNS[2:]]
        row += [_fmt(v) for v in traj.final]
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    system = load_system(args.system)
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(-args.box, args.box, size=(args.samples, system.n))
    report = verify_multiplier(system, pts, tol=args.tol)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def cmd_geometry(args) -> int:
    g = elliptic_geometry(args.a, args.b)
    row = g.to_row()
    print(",".join(row))
    print(",".join(_fmt(v) for v in row.values()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consode", description="Conservative ODE integration experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate one experiment and write CSV artifacts")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    r.add_argument("-o", "--output", help="output directory (overrides $CONSODE_OUTPUT_DIR and the config)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several methods on one problem and tabulate them")
    c.add_argument("configs", nargs="+")
    c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a key in every config")
    c.add_argument("-o", "--output", help="write the table here instead of stdout")
    c.add_argument("-j", "--jobs", type=int, default=1, help="runs in parallel")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="check the multiplier identity of a system file")
    v.add_argument("system")
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--box", type=float, default=2.0, help="sample uniformly in [-box, box]^n")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-12)
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("geometry", help="components of y^2 = x^3 + a x + b")
    g.add_argument("--a", type=float, required=True)
    g.add_argument("--b", type=float, required=True)
    g.set_defaults(func=cmd_geometry)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: file not found: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
