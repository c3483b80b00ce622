from fractions import Fraction
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special as sc
from scipy import stats

from semsource.special import (bessel_i, gaussian_q, log_bessel_i, marcum_q,
                               reg_gamma_lower, reg_gamma_upper)

mpmath.mp.dps = 40


def mp_gamma_upper(s, x):
    return float(mpmath.gammainc(s, x, mpmath.inf, regularized=True))


@pytest.mark.parametrize("s,x", [(0.5, 0.1), (1.0, 1.0), (10.0, 2.5), (10.0, 25.0),
                                 (37.5, 40.0), (2.0, 0.0), (0.25, 7.0)])
def test_gamma_upper_against_mpmath(s, x):
    assert reg_gamma_upper(s, x) == pytest.approx(mp_gamma_upper(s, x), rel=1e-12, abs=1e-300)


def test_gamma_endpoints():
    assert reg_gamma_upper(3.0, 0.0) == 1.0
    assert reg_gamma_lower(3.0, 0.0) == 0.0
    assert reg_gamma_upper(3.0, 1e4) == 0.0


@pytest.mark.parametrize("s,x", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5), (float("nan"), 1.0)])
def test_gamma_domain_errors(s, x):
    with pytest.raises(ValueError):
        reg_gamma_upper(s, x)


@given(st.floats(0.05, 60), st.floats(0, 200))
def test_gamma_complement(s, x):
    assert reg_gamma_upper(s, x) + reg_gamma_lower(s, x) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("x", [-3.0, -0.5, 0.0, 0.7, 2.0, 6.0])
def test_gaussian_q(x):
    assert gaussian_q(x) == pytest.approx(stats.norm.sf(x), rel=1e-13)


@pytest.mark.parametrize("m", [0.5, 1.0, 2.5, 10.0, 37.5])
@pytest.mark.parametrize("a", [0.0, 0.3, 2.0, 6.0, 15.0])
@pytest.mark.parametrize("b", [0.0, 0.5, 3.0, 8.0, 20.0])
def test_marcum_matches_noncentral_chi2(m, a, b):
    # Q_M(a, b) is the survival function of a noncentral chi-square with 2M
    # degrees of freedom and noncentrality a² evaluated at b².
    want = 1.0 if b == 0 else stats.ncx2.sf(b * b, 2 * m, a * a) if a > 0 \
        else stats.chi2.sf(b * b, 2 * m)
    assert marcum_q(m, a, b) == pytest.approx(want, abs=1e-12)


def test_marcum_against_mpmath_integral():
    m, a, b = 10.0, math.sqrt(20.0), math.sqrt(12.0)
    f = lambda x: x * (x / a) ** (m - 1) * mpmath.exp(-(x * x + a * a) / 2) * mpmath.besseli(m - 1, a * x)
    want = float(mpmath.quad(f, [b, b + 10, b + 40, mpmath.inf]))
    assert marcum_q(m, a, b) == pytest.approx(want, rel=1e-11)


def test_marcum_special_cases():
    assert marcum_q(5.0, 3.0, 0.0) == 1.0
    # a = 0 reduces to the regularized upper gamma function
    assert marcum_q(4.0, 0.0, 3.0) == pytest.approx(sc.gammaincc(4.0, 4.5), abs=1e-15)
    assert marcum_q(1.0, 2.0, 200.0) == 0.0


def test_marcum_broadcasts():
    out = marcum_q(10.0, np.array([0.5, 1.0, 2.0])[:, None], np.array([1.0, 4.0]))
    assert out.shape == (3, 2)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, np.inf)])
def test_marcum_domain(args):
    with pytest.raises(ValueError):
        marcum_q(*args)


@settings(max_examples=60)
@given(st.floats(0.5, 30), st.floats(0, 10), st.floats(0, 15), st.floats(0, 5))
def test_marcum_bounded_and_monotone(m, a, b, db):
    lo = marcum_q(m, a, b)
    hi = marcum_q(m, a, b + db)
    assert 0.0 <= hi <= lo + 1e-13 <= 1.0 + 1e-13
    # increasing in the noncentrality
    assert marcum_q(m, a + db, b) >= lo - 1e-13


def exact_bessel(n: int, x: Fraction, terms: int = 80) -> Fraction:
    """Ascending series in exact rationals; the truncation error is far below 1e-30 here."""
    total = Fraction(0)
    q = x * x / 4
    term = (x / 2) ** n / math.factorial(n)
    for k in range(terms):
        total += term
        term = term * q / ((k + 1) * (n + k + 1))
    return total


@pytest.mark.parametrize("n", [0, 1, 2, 9])
@pytest.mark.parametrize("x", [Fraction(1, 4), Fraction(3, 2), Fraction(7), Fraction(25, 2)])
def test_bessel_exact_rational(n, x):
    want = float(exact_bessel(n, x))
    assert bessel_i(n, float(x)) == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("nu", [0.0, 0.5, 9.0, 9.5, 36.5])
@pytest.mark.parametrize("x", [1e-3, 0.8, 30.0, 400.0, 2000.0])
def test_log_bessel_against_scaled_scipy(nu, x):
    want = math.log(sc.ive(nu, x)) + x
    assert log_bessel_i(nu, x) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_bessel_zero_and_negative_order():
    assert bessel_i(0, 0.0) == 1.0
    assert bessel_i(3, 0.0) == 0.0
    assert log_bessel_i(2.0, 0.0) == -math.inf
    assert bessel_i(-1, 2.3) == pytest.approx(sc.iv(1, 2.3), rel=1e-13)


def test_bessel_overflow_signalled():
    assert np.isfinite(log_bessel_i(9.0, 1e4))
    with pytest.raises(OverflowError):
        bessel_i(9.0, 1e4)


@pytest.mark.parametrize("args", [(-2.0, 1.0), (1.0, -1.0), (1.0, np.nan)])
def test_bessel_domain(args):
    with pytest.raises(ValueError):
        log_bessel_i(*args)


def test_scalar_returns_python_float():
    assert type(marcum_q(2.0, 1.0, 1.0)) is float
    assert type(reg_gamma_upper(2.0, 1.0)) is float
