import math

import numpy as np
import pytest

from consode.solver import (NewtonConfig, NotConverged, SingularJacobian, lu_factor, lu_solve,
                            newton_solve)


def test_affine_one_iteration():
    res = newton_solve(lambda x: x - 2.0, [0.0], jacobian=lambda x: [[1.0]])
    assert res.root[0] == 2.0
    assert res.iterations == 1
    assert res.converged


def test_affine_finite_difference_jacobian():
    # the difference quotient is off by rounding, so one correction step follows
    res = newton_solve(lambda x: x - 2.0, [0.0])
    assert res.root[0] == 2.0
    assert res.iterations <= 2


def test_quadratic_root():
    res = newton_solve(lambda x: x * x - 4.0, [3.0])
    assert abs(res.root[0] - 2.0) <= 1e-15


def test_analytic_jacobian():
    res = newton_solve(lambda x: x * x - 2.0, [1.0], jacobian=lambda x: [[2 * x[0]]])
    assert res.root[0] == pytest.approx(math.sqrt(2.0), abs=1e-15)


def test_two_dimensional_system():
    # circle x^2 + y^2 = 4 meets the line x = y at (sqrt 2, sqrt 2)
    def f(v):
        return np.array([v[0] ** 2 + v[1] ** 2 - 4.0, v[0] - v[1]])
    res = newton_solve(f, [1.0, 2.0])
    assert np.allclose(res.root, [math.sqrt(2), math.sqrt(2)], atol=1e-14)


def test_not_converged_carries_best_iterate():
    cfg = NewtonConfig(abs_tol=1e-300, max_iters=2, stall_factor=1.0)
    with pytest.raises(NotConverged) as info:
        newton_solve(lambda x: np.exp(x) - 10.0, [0.0], cfg)
    r = info.value.result
    assert r.iterations == 2
    assert not r.accepted
    assert np.isfinite(r.residual_norm)


def test_no_root_fails():
    with pytest.raises(NotConverged):
        newton_solve(lambda x: x * x + 1.0, [0.5])


def test_singular_jacobian():
    with pytest.raises(SingularJacobian):
        newton_solve(lambda x: np.array([1.0 + 0 * x[0]]), [0.3])


def test_stall_accepted_near_round_off_floor():
    # x^2 - 2 has no double-precision root, so the residual cannot reach
    # 1e-20; the iteration stalls and is accepted only with a loose stall band.
    strict = NewtonConfig(abs_tol=1e-20, stall_factor=1.0)
    loose = NewtonConfig(abs_tol=1e-20, stall_factor=1e12)
    f = lambda x: x * x - 2.0
    with pytest.raises(NotConverged):
        newton_solve(f, [1.0], strict)
    res = newton_solve(f, [1.0], loose)
    assert res.stalled and res.accepted and not res.converged
    assert abs(res.root[0] - math.sqrt(2.0)) <= 4.5e-16


@pytest.mark.parametrize("kw", [dict(abs_tol=0.0), dict(max_iters=0), dict(damping=1.0), dict(damping=0.0),
                                dict(fd_step=-1.0), dict(stall_factor=0.5)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        NewtonConfig(**kw)


def test_lu_against_numpy():
    rng = np.random.default_rng(0)
    for n in range(1, 7):
        a = rng.normal(size=(n, n))
        b = rng.normal(size=n)
        lu, perm, sign = lu_factor(a.tolist())
        x = lu_solve(lu, perm, b.tolist())
        assert np.allclose(x, np.linalg.solve(a, b), rtol=1e-12, atol=1e-12)
        det = sign
        for k in range(n):
            det *= lu[k][k]
        assert det == pytest.approx(np.linalg.det(a), rel=1e-10)


def test_lu_pivot_ties_pick_lowest_row():
    lu, perm, _ = lu_factor([[1.0, 2.0], [-1.0, 3.0]])
    assert list(perm)[0] == 0


def test_lu_singular():
    with pytest.raises(ZeroDivisionError):
        lu_factor([[1.0, 2.0], [2.0, 4.0]])
