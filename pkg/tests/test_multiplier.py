import math

import numpy as np
import pytest

from consode.multiplier import (ConservedSystem, DiscreteMultiplier, MinorSingular, continuous_multiplier,
                                discrete_multiplier_eval, partition_minor, verify_multiplier)
from consode.polynomial import Polynomial

NAMES = ["x", "y"]


def parse(text, params=None):
    return Polynomial.parse(text, NAMES, params)


def harmonic():
    return ConservedSystem((parse("y"), parse("-x")), (parse("x^2 + y^2"),))


def test_continuous_multiplier_elliptic(elliptic):
    (row,) = continuous_multiplier(elliptic)
    assert row == (parse("-3*x^2 + 1"), parse("2*y"))


def test_continuous_multiplier_linear():
    s = ConservedSystem((parse("y"), parse("-2*y")), (parse("2*x + y"),))
    (row,) = continuous_multiplier(s)
    assert row == (Polynomial.constant(2, 2.0), Polynomial.constant(2, 1.0))


def test_harmonic_multiplier_annihilates_f():
    s = harmonic()
    (row,) = continuous_multiplier(s)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-3, 3, (100, 2)):
        assert row[0](x) == 2 * x[0] and row[1](x) == 2 * x[1]
        assert row[0](x) * s.f[0](x) + row[1](x) * s.f[1](x) == 0.0


def test_verify_elliptic_passes(elliptic):
    pts = np.random.default_rng(1).uniform(-2, 2, (500, 2))
    rep = verify_multiplier(elliptic, pts, tol=1e-12)
    assert rep.passed
    assert rep.max_scaled_residual <= 1e-14
    assert rep.n_samples == 500


def test_verify_zero_field():
    z = Polynomial.zero(2)
    s = ConservedSystem((z, z), (parse("x^3*y - y^5 + 2"),))
    rep = verify_multiplier(s, np.random.default_rng(2).normal(size=(50, 2)))
    assert rep.max_residual == 0.0


def test_verify_perturbed_fails(elliptic):
    bad = elliptic.with_f((elliptic.f[0], elliptic.f[1] + 1e-3))
    pts = np.random.default_rng(3).uniform(-2, 2, (200, 2))
    rep = verify_multiplier(bad, pts, tol=1e-10)
    assert not rep.passed
    # residual of the injected defect is 2y * 1e-3
    expected = max(abs(2 * y * 1e-3) for _, y in pts)
    assert rep.max_residual == pytest.approx(expected, rel=1e-6)


def test_verify_reports_multiplier_deviation(elliptic):
    wrong = ((parse("-3*x^2 + 1"), parse("2*y + 1"))),
    rep = verify_multiplier(elliptic, [[0.0, 0.0], [1.0, 1.0]], multiplier=wrong)
    assert rep.max_deviation == 1.0
    assert not rep.passed


def test_discrete_multiplier_hand_formula(elliptic):
    dm = DiscreteMultiplier(elliptic)
    rng = np.random.default_rng(4)
    for _ in range(100):
        (x, y), (xn, yn) = rng.uniform(-2, 2, (2, 2))
        lam = dm([x, y], [xn, yn])
        assert lam.shape == (1, 2)
        assert lam[0, 0] == pytest.approx(-(x * x + x * xn + xn * xn) + 1, rel=1e-14, abs=1e-14)
        assert lam[0, 1] == y + yn


def test_discrete_multiplier_example(elliptic):
    lam = DiscreteMultiplier(elliptic)([1.0, 2.0], [3.0, 4.0])
    assert lam.tolist() == [[-12.0, 6.0]]
    psi = elliptic.psi[0]
    assert psi([3.0, 4.0]) - psi([1.0, 2.0]) == -12.0 * 2 + 6.0 * 2


def test_equal_point_collapse(elliptic):
    dm = DiscreteMultiplier(elliptic)
    (row,) = continuous_multiplier(elliptic)
    for y in np.random.default_rng(5).uniform(-2, 2, (50, 2)):
        lam = dm(y, y)
        assert lam[0, 0] == pytest.approx(row[0](y), rel=1e-12, abs=1e-15)
        assert lam[0, 1] == row[1](y)


def test_discrete_multiplier_dimension_mismatch(elliptic):
    with pytest.raises(ValueError):
        discrete_multiplier_eval(DiscreteMultiplier(elliptic), [1.0], [1.0, 2.0])


def test_partition_minor_identity(elliptic):
    dm = DiscreteMultiplier(elliptic)
    minor, rest, det = partition_minor(dm, [0.2, 0.1], [0.3, -0.4])
    assert minor[0, 0] == -(0.04 + 0.06 + 0.09) + 1
    assert rest[0, 0] == 0.1 - 0.4
    assert det == pytest.approx(minor[0, 0], rel=1e-15)


def test_partition_minor_swapped():
    s = ConservedSystem((parse("y"), parse("-x")), (parse("x^2 + y^2"),), partition=(1, 0))
    minor, rest, det = partition_minor(DiscreteMultiplier(s), [1.0, 2.0], [3.0, 4.0])
    assert minor[0, 0] == 6.0 and rest[0, 0] == 4.0 and det == 6.0


def test_coordinate_conserved_quantity():
    s = ConservedSystem((Polynomial.zero(2), parse("x")), (parse("x"),))
    dm = DiscreteMultiplier(s)
    for xp, xn in np.random.default_rng(6).normal(size=(20, 2, 2)):
        lam = dm(xp, xn)
        assert lam.tolist() == [[1.0, 0.0]]
        assert partition_minor(dm, xp, xn)[2] == 1.0


def test_minor_singular_at_fold(elliptic):
    dm = DiscreteMultiplier(elliptic)
    y = [1 / math.sqrt(3), 0.25]
    with pytest.raises(MinorSingular) as info:
        partition_minor(dm, y, y)
    assert info.value.x_prev.tolist() == y
    with pytest.raises(MinorSingular):
        partition_minor(dm, [1.0, 0.0], [0.0, 0.0])


@pytest.mark.parametrize("kwargs", [
    dict(f=(parse("y"), parse("-x")), psi=()),
    dict(f=(parse("y"), parse("-x")), psi=(parse("x"), parse("y"))),
    dict(f=(parse("y"), parse("-x")), psi=(parse("x^2 + y^2"),), partition=(0, 0)),
    dict(f=(parse("y"), Polynomial.variable(3, 0)), psi=(parse("x"),)),
])
def test_system_validation(kwargs):
    with pytest.raises(ValueError):
        ConservedSystem(**kwargs)


def test_separable_split(elliptic):
    assert elliptic.separable_split() == 1
    with pytest.raises(ValueError):
        ConservedSystem((parse("x*y"), parse("-x")), (parse("x"),)).separable_split()
