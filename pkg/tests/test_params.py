import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from selfsim.errors import DomainError, RangeError
from selfsim.params import (a_bounds, chi_eval, chi_window, lambda_rigorous, lambda_rigorous_raw, mu_bounds,
                            theta_eval, theta_lambda, validate_and_derive)


def test_reference_tuple_derived_constants(ref_params):
    p = ref_params
    # independent arithmetic: gamma = 1.08/1.43, gamma1 = 1.03/1.455
    assert p.a1 == pytest.approx(0.475, abs=1e-15)
    assert p.gamma == pytest.approx(0.755245, abs=5e-7)
    assert p.gamma1 == pytest.approx(0.707904, abs=5e-7)
    assert p.h_star == pytest.approx(0.0125, abs=1e-15)
    assert p.alpha_star == pytest.approx(0.300699, abs=5e-7)
    assert p.delta_d == 0
    assert p.theta_exponent == pytest.approx(2 / 2.94, rel=1e-14)
    assert p.chi_exponent == pytest.approx(1 + 1 / 2.94, rel=1e-14)


def test_a_below_range_names_a():
    with pytest.raises(RangeError) as e:
        validate_and_derive(3, 0.30, 0.98, 10)
    assert "a" in str(e.value)


def test_mu_and_lambda_rejections():
    with pytest.raises(RangeError, match="mu"):
        validate_and_derive(3, 0.45, 0.90, 10)
    with pytest.raises(RangeError, match="lambda"):
        validate_and_derive(3, 0.45, 0.98, 1.0)
    with pytest.raises(RangeError):
        validate_and_derive(2, 0.45, 0.98, 10)


def test_even_dimension_tuple():
    p = validate_and_derive(4, 0.16, 0.499, 10)
    assert p.delta_d == 1
    lo, hi = mu_bounds(4, 0.16)
    assert lo == pytest.approx(0.495, abs=1e-12)
    assert hi == pytest.approx(0.5, abs=1e-15)


def test_theta_examples(ref_params):
    assert theta_eval(1.0, ref_params) == 1.0
    assert theta_eval(0.05, ref_params) == pytest.approx(0.05 ** 0.680272, rel=1e-6)
    assert theta_eval(0.05, ref_params) == pytest.approx(0.130300, abs=5e-7)
    p4 = validate_and_derive(4, 0.16, 0.499, 10)
    expo = 1 + 3 / (4 * 0.499)
    assert expo == pytest.approx(2.50301, abs=5e-6)
    assert theta_eval(0.05, p4) == pytest.approx(0.05 ** expo, rel=1e-12)
    assert theta_eval(0.05, p4) == pytest.approx(5.55e-4, rel=5e-3)
    with pytest.raises(DomainError):
        theta_eval(0.0, ref_params)


def test_theta_lambda_scales_argument(ref_params):
    assert theta_lambda(0.003, ref_params) == pytest.approx(theta_eval(0.03, ref_params), rel=1e-15)


def test_chi_examples(ref_params):
    lo, hi = chi_window(3)
    assert lo == pytest.approx(1.405648, abs=5e-7)
    assert hi == pytest.approx(1.459455, abs=5e-7)
    assert chi_eval(1.0, ref_params) == 1.0
    assert chi_eval(1.50, ref_params) == pytest.approx(math.cos(1.5) ** 1.340136, rel=1e-6)
    assert chi_eval(1.50, ref_params) == pytest.approx(0.0288, abs=5e-4)
    ratio = chi_eval(1.43, ref_params) / math.cos(1.43) ** ref_params.chi_exponent
    assert 1.0 <= ratio <= 81.0
    for bad in (0.0, math.pi / 2, -0.1):
        with pytest.raises(DomainError):
            chi_eval(bad, ref_params)


def test_lambda_rigorous_reference_overflows(ref_params):
    b = lambda_rigorous(ref_params, 2.0)
    assert b.overflow and math.isinf(b.value)
    expected = 9 * 2 * (2 / 3) ** (1 - 1 / 0.98) / ((1 / 0.98 - 1) * 0.0125)
    assert b.exponent == pytest.approx(expected, rel=1e-12)
    assert b.exponent == pytest.approx(71147, rel=1e-4)


def test_lambda_rigorous_out_of_range_mu():
    # mu = 0.9 is not admissible for a = 0.45, so the raw formula is used
    b = lambda_rigorous_raw(3, 0.45, 0.90, 2.0)
    assert b.exponent == pytest.approx(18 * (2 / 3) ** (1 - 1 / 0.9) / ((1 / 0.9 - 1) * 0.0125), rel=1e-12)
    assert b.exponent == pytest.approx(13557.2, abs=0.1)
    assert b.overflow


def test_lambda_rigorous_monotone_in_M(ref_params):
    assert lambda_rigorous(ref_params, 4.0).exponent > lambda_rigorous(ref_params, 2.0).exponent
    with pytest.raises(DomainError):
        lambda_rigorous(ref_params, 1.0)


# ---------------------------------------------------------------- properties

@st.composite
def admissible(draw):
    d = draw(st.integers(3, 8))
    lo, hi = a_bounds(d)
    lo = max(lo, 3.0 / ((3 * d - 5) * (d - 1)))
    a = draw(st.floats(lo, hi, exclude_min=True, exclude_max=True))
    mlo, mhi = mu_bounds(d, a)
    frac = draw(st.floats(1e-6, 1 - 1e-6))
    mu = mlo + frac * (mhi - mlo)
    assume(mlo < mu < mhi)
    lam = draw(st.floats(1.5, 1e3))
    return d, a, mu, lam


@settings(max_examples=200, deadline=None)
@given(admissible())
def test_derived_orderings_hold(t):
    d, a, mu, lam = t
    try:
        p = validate_and_derive(d, a, mu, lam)
    except RangeError:
        # floats within an ulp of a boundary; rejection is legitimate there
        return
    assert (d - 1) / (d * mu) < p.gamma1 < p.gamma < d - 2
    assert a < p.a1 < 1 / ((d - 1) * (d - 2))
    assert 0 < p.h_star < 1
    assert 0 < p.alpha_star < 1
    assert p.alpha_star < d - 2 - 1 / (1 / (d - 2) + a)
    assert p.delta_d == (1 if d % 2 == 0 else 0)


@settings(max_examples=25, deadline=None)
@given(admissible())
def test_theta_shape(t):
    p = validate_and_derive(*t)
    s = np.linspace(1e-4, 2.0, 10_000)
    th = theta_eval(s, p)
    assert np.all(np.diff(th) >= 0)
    assert np.all((th > 0) & (th <= 1))
    low = s[s <= 0.1]
    assert np.max(np.abs(theta_eval(low, p) - low ** p.theta_exponent)) <= 1e-12
    assert np.all(theta_eval(np.linspace(1.0, 50.0, 500), p) == 1.0)


@settings(max_examples=25, deadline=None)
@given(admissible())
def test_chi_ratio_bounds(t):
    p = validate_and_derive(*t)
    sig = np.linspace(1e-6, 0.5 * math.pi - 1e-6, 10_000)
    ratio = chi_eval(sig, p) / np.cos(sig) ** p.chi_exponent
    assert ratio.min() >= 1.0 - 1e-12
    assert ratio.max() <= 9.0 * p.d ** 2
