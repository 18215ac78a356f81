import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate

from selfsim.field import ScalarField, bracket
from selfsim.transport import apply_transport
from selfsim.verify import (FAIL, PASS, REPORT, Check, VerificationReport, lemma_far, lemma_near,
                            lemma_whole_space, omega_checks, psi_checks, radial_convolution, shell_average)


def by_name(checks):
    return {c.name: c for c in checks}


def test_seed_passes_pointwise_checks(ref_params, seed64):
    c = by_name(psi_checks(seed64, ref_params))
    for name in ("psi_range", "psi_gradient", "psi_radial_derivative"):
        assert c[name].status == PASS, name
    assert c["psi_envelope"].value == pytest.approx(1 / 0.45, rel=1e-12)
    assert c["psi_hessian"].status == REPORT and math.isfinite(c["psi_hessian"].value)


def test_planted_growth_fails_gradient_check(ref_params, grid64):
    f = lambda r, z: bracket(r, z) ** 0.5

    def grad(r, z):
        g = 0.5 * bracket(r, z) ** -1.5
        return g * r, g * z

    planted = ScalarField.from_function(grid64, f, kind="even", with_gradient=grad)
    checks = psi_checks(planted, ref_params)
    c = by_name(checks)
    assert c["psi_gradient"].status == FAIL and c["psi_gradient"].hard
    rep = VerificationReport(checks)
    assert not rep.passed
    assert c["psi_gradient"] in rep.failures


def test_omega_checks_after_one_transport(ref_params, grid64, seed64):
    om = apply_transport(seed64, grid64, ref_params)
    c = by_name(omega_checks(om, ref_params))
    assert c["omega_positive"].status == PASS
    assert c["omega_core_lower"].status == PASS and c["omega_core_lower"].value > 0
    for name in ("omega_envelope", "omega_log_derivative"):
        assert c[name].status == REPORT and math.isfinite(c[name].value)


def test_nonfinite_measured_constant_fails():
    rep = VerificationReport([Check("c", "finite", math.inf, status=REPORT)])
    assert not rep.passed
    rep = VerificationReport([Check("c", "finite", 3.0, status=REPORT)])
    assert rep.passed


def test_digest_ignores_wall_clock():
    a = VerificationReport([Check("x", "b", 1.0, 2.0, PASS, True, 1),
                            Check("t", "seconds", 1.5, 60.0, PASS, volatile=True)])
    b = VerificationReport([Check("x", "b", 1.0, 2.0, PASS, True, 1),
                            Check("t", "seconds", 7.5, 60.0, PASS, volatile=True)])
    assert a.digest() == b.digest()
    c = VerificationReport([Check("x", "b", 1.5, 2.0, PASS, True, 1),
                            Check("t", "seconds", 1.5, 60.0, PASS, volatile=True)])
    assert a.digest() != c.digest()


def test_report_json_round_trip():
    rep = VerificationReport([Check("x", "b", 1.0, [0.0, 1.0], PASS, True, 4, {"k": np.float64(2.0)}),
                              Check("y", "c", math.nan, None, "skipped", extra={"reason": "none"})])
    back = VerificationReport.from_dict(json.loads(rep.to_json()))
    assert back.names() == ["x", "y"]
    assert back.digest() == rep.digest()
    assert "hard threshold" in rep.table()


# ---------------------------------------------------------------- convolution lemmas

FOUR_PI = 4 * math.pi


def test_exact_four_pi_cases():
    assert abs(lemma_whole_space(3, 1.0, 1.0, 0.0, 1.0) / FOUR_PI - 1) <= 1e-10
    assert abs(lemma_near(3, 2.0, 0.0, 1.0) * (3 - 2.0) / FOUR_PI - 1) <= 1e-10
    assert abs(lemma_far(3, 2.0, 2.0, 0.0, 1.0) / FOUR_PI - 1) <= 1e-10


def test_shell_average_matches_angular_quadrature():
    for m, b, t, rho in [(3, 1.2, 0.4, 0.7), (4, 2.5, 2.0, 0.3), (5, 3.0, 1.0, 1.5)]:
        sm2 = 2 * math.pi ** ((m - 1) / 2) / math.gamma((m - 1) / 2)
        q = integrate.quad(lambda th: sm2 * math.sin(th) ** (m - 2)
                           * (t * t + rho * rho - 2 * t * rho * math.cos(th)) ** (-b / 2), 0, math.pi,
                           epsabs=0, epsrel=1e-12, limit=200)[0]
        assert float(shell_average(m, b, t, rho)) == pytest.approx(q, rel=1e-10)


def brute_convolution(m, a, b, rho, t0, t1):
    """Nested adaptive quadrature in (|u|, angle) with no special handling."""
    sm2 = 2 * math.pi ** ((m - 1) / 2) / math.gamma((m - 1) / 2)

    def shell(t):
        f = lambda th: sm2 * t ** (m - 1 - a) * math.sin(th) ** (m - 2) * (
            t * t + rho * rho - 2 * t * rho * math.cos(th)) ** (-b / 2)
        return integrate.quad(f, 0, math.pi, limit=200, epsrel=1e-10)[0]

    pts = [rho] if t0 < rho < t1 and math.isfinite(t1) else None
    return integrate.quad(shell, t0, t1, points=pts, limit=200, epsrel=1e-9)[0]


@pytest.mark.parametrize("case", [
    (3, 0.5, 1.2, 0.7, 0.0, 2.0),
    (3, 0.3, 2.6, 0.7, 0.0, 2.0),
    (4, 1.0, 3.5, 1.5, 0.0, 3.0),
    (3, 1.5, 2.5, 3.0, 1.0, math.inf),
    (4, 2.5, 2.0, 0.3, 1.0, math.inf),
    (3, 1.0, 1.0, 0.5, 0.0, 1.0),
])
def test_radial_convolution_against_brute_force(case):
    assert radial_convolution(*case) == pytest.approx(brute_convolution(*case), rel=1e-6)


def test_radial_convolution_at_origin_closed_form():
    # rho = 0 reduces to a pure power of |u|
    for m, a, b in [(3, 0.4, 1.1), (4, 1.0, 1.5)]:
        e = m - a - b
        exact = 2 * math.pi ** (m / 2) / math.gamma(m / 2) * 2.0 ** e / e
        assert radial_convolution(m, a, b, 0.0, 0.0, 2.0) == pytest.approx(exact, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([3, 4]), st.floats(0.0, 0.95), st.floats(0.0, 0.95), st.floats(1e-2, 5.0),
       st.floats(0.1, 0.9))
def test_radial_convolution_is_additive(m, fa, fb, rho, split):
    a, b = fa * m, fb * m
    assume(a + b < m - 0.05)
    t1 = 3.0
    tm = split * t1
    whole = radial_convolution(m, a, b, rho, 0.0, t1)
    parts = radial_convolution(m, a, b, rho, 0.0, tm) + radial_convolution(m, a, b, rho, tm, t1)
    assert parts == pytest.approx(whole, rel=1e-10)
