import math

import numpy as np
import pytest

from consode import _core
from consode.integrators import (StepperSpec, backward_euler_step, conservative_step, constraint_residual,
                                 euler_step, implicit_midpoint_step, integrate, stormer_verlet_step,
                                 write_trajectory_csv)
from consode.multiplier import ConservedSystem, DiscreteMultiplier, MinorSingular
from consode.polynomial import Polynomial
from consode.solver import NewtonConfig, NotConverged

KINDS = sorted(_core.KINDS)
TAU = 0.3


def parse(text, names=("x", "y"), params=None):
    return Polynomial.parse(text, names, params)


def rigid_body():
    """Euler top with two quadratic invariants (n=3, m=2)."""
    names = ("x", "y", "z")
    f = (parse("y*z", names), parse("-2*z*x", names), parse("x*y", names))
    psi = (parse("x^2 + y^2 + z^2", names), parse("2*x^2 + y^2", names))
    return ConservedSystem(f, psi, names=names)


def scalar_root(g, center, predictor, half_width=1.0, n_grid=20001):
    """Root of ``g`` nearest ``predictor``: sign-change scan plus bisection."""
    grid = np.linspace(center - half_width, center + half_width, n_grid)
    vals = np.array([g(t) for t in grid])
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0):
        lo, hi = grid[i], grid[i + 1]
        glo = g(lo)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid in (lo, hi):
                break
            gm = g(mid)
            if (gm <= 0) == (glo <= 0):
                lo, glo = mid, gm
            else:
                hi = mid
        roots.append(0.5 * (lo + hi))
    assert roots, "oracle found no root"
    return min(roots, key=lambda r: abs(r - predictor))


# closed forms of the three implicit elliptic steps with y' eliminated

def conservative_oracle(x, y, tau, a=-1.0):
    g = lambda xn: xn - x - tau * (2 * y + tau * (x * x + x * xn + xn * xn + a))
    xn = scalar_root(g, x, x + tau * 2 * y)
    return np.array([xn, y + tau * (x * x + x * xn + xn * xn + a)])


def backward_euler_oracle(x, y, tau, a=-1.0):
    g = lambda xn: xn - x - 2 * tau * (y + tau * (3 * xn * xn + a))
    xn = scalar_root(g, x, x + tau * 2 * y)
    return np.array([xn, y + tau * (3 * xn * xn + a)])


def midpoint_oracle(x, y, tau, a=-1.0):
    yn = lambda xn: y + tau * (3 * (0.5 * (x + xn)) ** 2 + a)
    g = lambda xn: xn - x - tau * (y + yn(xn))
    xn = scalar_root(g, x, x + tau * 2 * y)
    return np.array([xn, yn(xn)])


def test_euler_examples():
    f = lambda v: np.array([2 * v[1], 3 * v[0] ** 2 - 1])
    assert euler_step(f, [0.0, 0.0], 0.3).tolist() == [0.0, -0.3]
    assert euler_step(lambda v: v, [1.0], 0.1).tolist() == [1.1]


def test_backward_euler_and_midpoint_linear_decay():
    f = lambda v: -v
    assert backward_euler_step(f, [1.0], 1.0)[0] == pytest.approx(0.5, abs=1e-15)
    assert implicit_midpoint_step(f, [1.0], 1.0)[0] == pytest.approx(1 / 3, abs=1e-15)


@pytest.mark.parametrize("step,oracle", [(backward_euler_step, backward_euler_oracle),
                                         (implicit_midpoint_step, midpoint_oracle)])
def test_implicit_baselines_against_grid_oracle(step, oracle):
    f = lambda v: np.array([2 * v[1], 3 * v[0] ** 2 - 1])
    got = step(f, [0.5, 0.1], TAU)
    assert np.allclose(got, oracle(0.5, 0.1, TAU), rtol=0, atol=1e-13)


def test_stormer_verlet_harmonic():
    out = stormer_verlet_step(lambda p: p, lambda q: -q, [1.0, 0.0], 0.1)
    assert out[0] == pytest.approx(0.995, abs=1e-15)
    assert out[1] == pytest.approx(-0.09975, abs=1e-15)


def test_stormer_verlet_free_drift():
    out = stormer_verlet_step(lambda p: 2 * p, lambda q: 0 * q, [1.0, 3.0], 0.5)
    assert out.tolist() == [4.0, 3.0]


def test_kernel_stormer_verlet_matches_reference():
    s = ConservedSystem((parse("y"), parse("-x")), (parse("x^2 + y^2"),))
    tr = integrate(s, StepperSpec("stormer_verlet", 0.1), [1.0, 0.0], 1)
    assert np.array_equal(tr.final, stormer_verlet_step(lambda p: p, lambda q: -q, [1.0, 0.0], 0.1))


def test_stormer_verlet_needs_separable():
    s = ConservedSystem((parse("x*y"), parse("-x")), (parse("x"),))
    with pytest.raises(ValueError):
        integrate(s, StepperSpec("stormer_verlet", 0.1), [1.0, 0.0], 3)


def test_conservative_step_against_oracle(elliptic, elliptic_x0):
    dm = DiscreteMultiplier(elliptic)
    spec = StepperSpec("conservative_multiplier", TAU)
    xn = conservative_step(elliptic, dm, elliptic_x0, spec, check=True)
    assert np.allclose(xn, conservative_oracle(*elliptic_x0, TAU), rtol=0, atol=1e-13)
    psi = elliptic.psi[0]
    assert abs(psi(xn) - psi(elliptic_x0)) <= 1e-14
    assert constraint_residual(dm, elliptic_x0, xn, spec) <= 1e-12


def test_conservative_step_random_states_against_oracle(elliptic):
    dm = DiscreteMultiplier(elliptic)
    spec = StepperSpec("conservative_multiplier", 0.05)
    rng = np.random.default_rng(11)
    for x in rng.uniform(-1, 1, (20, 2)):
        xn = conservative_step(elliptic, dm, x, spec)
        assert np.allclose(xn, conservative_oracle(*x, 0.05), rtol=0, atol=1e-12)


def test_conservative_step_at_equilibrium():
    # x' = y, y' = -y conserves x + y; every (x, 0) is an equilibrium
    s = ConservedSystem((parse("y"), parse("-y")), (parse("x + y"),))
    xn = conservative_step(s, DiscreteMultiplier(s), [2.0, 0.0], StepperSpec("conservative_multiplier", TAU))
    assert xn.tolist() == [2.0, 0.0]


def test_elliptic_equilibrium_is_singular(elliptic):
    # the equilibrium is a critical point of psi, so every minor of the multiplier vanishes
    xstar = np.array([-1 / math.sqrt(3), 0.0])
    with pytest.raises(MinorSingular):
        conservative_step(elliptic, DiscreteMultiplier(elliptic), xstar, StepperSpec("conservative_multiplier", TAU))


def test_conservative_step_rejects_foreign_multiplier(elliptic):
    other = DiscreteMultiplier(rigid_body())
    with pytest.raises(ValueError):
        conservative_step(elliptic, other, [0.1, 0.2], StepperSpec("conservative_multiplier", TAU))


def test_single_step_trajectory_is_one_step(elliptic, elliptic_x0):
    spec = StepperSpec("conservative_multiplier", TAU)
    tr = integrate(elliptic, spec, elliptic_x0, 1)
    assert tr.states.shape == (2, 2)
    assert np.array_equal(tr.final, conservative_step(elliptic, DiscreteMultiplier(elliptic), elliptic_x0, spec))
    assert tr.times.tolist() == [0.0, TAU]


def test_two_invariants_conserved():
    s = rigid_body()
    x0 = np.array([0.3, 0.8, -0.5])
    tr = integrate(s, StepperSpec("conservative_multiplier", 0.05), x0, 2000)
    assert tr.ok
    psi = s.psi_many(tr.states)
    assert np.abs(psi - psi[0]).max() <= 1e-13


@pytest.mark.parametrize("kind", KINDS)
def test_backends_bit_identical(elliptic, elliptic_x0, kind):
    if "cython" not in _core.available_backends():
        pytest.skip("compiled kernel not built")
    spec = StepperSpec(kind, TAU)
    a = integrate(elliptic, spec, elliptic_x0, 300, backend="python")
    b = integrate(elliptic, spec, elliptic_x0, 300, backend="cython")
    assert a.status == b.status and a.failed_step == b.failed_step
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.iterations, b.iterations)
    assert np.array_equal(a.residuals, b.residuals)


def test_backends_bit_identical_multi_invariant():
    if "cython" not in _core.available_backends():
        pytest.skip("compiled kernel not built")
    s = rigid_body()
    spec = StepperSpec("conservative_multiplier", 0.1)
    a = integrate(s, spec, [0.3, 0.8, -0.5], 200, backend="python")
    b = integrate(s, spec, [0.3, 0.8, -0.5], 200, backend="cython")
    assert np.array_equal(a.states, b.states)


@pytest.mark.parametrize("form", ["polarized", "average", "midpoint"])
def test_fhat_forms_conserve(elliptic, elliptic_x0, form):
    tr = integrate(elliptic, StepperSpec("conservative_multiplier", 0.1, fhat_form=form), elliptic_x0, 200)
    psi = elliptic.psi_many(tr.states)
    assert np.abs(psi - psi[0]).max() <= 1e-13


def test_euler_diverges(elliptic, elliptic_x0):
    tr = integrate(elliptic, StepperSpec("explicit_euler", TAU), elliptic_x0, 5000)
    assert tr.status == "diverged"
    assert np.abs(tr.final).max() > 10
    assert tr.failed_step == tr.n_steps


def test_minor_singular_aborts_with_step_index():
    s = ConservedSystem((parse("y"), parse("-x")), (parse("x^2 + y^2"),))
    tr = integrate(s, StepperSpec("conservative_multiplier", 0.1), [0.0, 0.0], 5)
    assert tr.status == "step_failure" and tr.failed_step == 1
    assert isinstance(tr.error, MinorSingular) and tr.error.step == 1
    assert tr.n_steps == 0
    with pytest.raises(MinorSingular):
        tr.raise_for_status()


def test_not_converged_aborts(elliptic, elliptic_x0):
    spec = StepperSpec("conservative_multiplier", TAU, NewtonConfig(max_iters=1, stall_factor=1.0))
    tr = integrate(elliptic, spec, elliptic_x0, 10)
    assert tr.status == "step_failure" and tr.failed_step == 1
    assert isinstance(tr.error, NotConverged)


def test_invalid_requests(elliptic):
    with pytest.raises(ValueError):
        StepperSpec("rk4", 0.1)
    with pytest.raises(ValueError):
        StepperSpec("explicit_euler", 0.0)
    with pytest.raises(ValueError):
        integrate(elliptic, StepperSpec("explicit_euler", 0.1), [0.0, 0.0], 0)
    with pytest.raises(ValueError):
        integrate(elliptic, StepperSpec("explicit_euler", 0.1), [0.0], 3)


def test_trajectory_csv(tmp_path, elliptic, elliptic_x0):
    tr = integrate(elliptic, StepperSpec("conservative_multiplier", TAU), elliptic_x0, 5)
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, elliptic, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,t,x1,x2,psi_1,newton_iters,residual"
    assert len(lines) == 7
    row = lines[3].split(",")
    assert float(row[2]) == tr.states[2, 0] and float(row[3]) == tr.states[2, 1]


def test_first_order_with_mixed_invariant():
    # x' = x, y' = -y conserves xy; the mixed term makes the scheme non-symmetric
    s = ConservedSystem((parse("x"), parse("-y")), (parse("x*y"),))
    exact = np.array([math.e, 0.5 / math.e])
    nc = NewtonConfig(abs_tol=1e-12)
    errs = [np.abs(integrate(s, StepperSpec("conservative_multiplier", tau, nc), [1.0, 0.5],
                             round(1 / tau)).final - exact).max() for tau in (0.1, 0.05, 0.025)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(0.8 <= p <= 1.2 for p in orders)


def test_second_order_when_symmetric(elliptic, elliptic_x0):
    # every term of the elliptic invariant involves a single variable, so the step is symmetric
    nc = NewtonConfig(abs_tol=1e-12)
    ref = integrate(elliptic, StepperSpec("implicit_midpoint", 0.025 / 256, nc), elliptic_x0, 10240).final
    errs = [np.abs(integrate(elliptic, StepperSpec("conservative_multiplier", tau, nc), elliptic_x0,
                             round(1 / tau)).final - ref).max() for tau in (0.1, 0.05)]
    assert 1.8 <= math.log2(errs[0] / errs[1]) <= 2.2


def test_backend_env_selects_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, CONSODE_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", "import consode; print(consode.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
