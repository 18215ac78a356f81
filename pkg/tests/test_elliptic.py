import math

import numpy as np
import pytest
from scipy import integrate

from selfsim.elliptic import (apply_elliptic, ball_volume, beta_d, beta_d_ball, build_quadrature, inner_angular,
                              kernel_monte_carlo, mass_normalizer, phi0_radial, potential_at, potential_eval,
                              potential_tables, reduced_kernel, sphere_area)
from selfsim.errors import DomainError
from selfsim.field import build_grid, extract_envelope_constant
from selfsim.transport import apply_transport


# ---------------------------------------------------------------- radial oracle
#
# For Omega = z r^{3-d} F(|(r, z)|) the lifted source in R^{d+4} is the radial
# density F, and Newton's shell theorem gives psi0 in closed form:
#   psi0(X) = beta S [ |X|^{-(d+2)} int_0^|X| F t^{d+3} dt + int_|X|^inf F t dt ],
# with S = |S^{d+3}|.

def lognormal(t, width):
    return np.exp(-np.log(t) ** 2 / width)


WIDE = lambda t: lognormal(t, 1.0)


def bump(t, centre, half):
    x = (np.asarray(t, dtype=float) - centre) / half
    out = np.zeros_like(x)
    m = np.abs(x) < 1
    out[m] = np.exp(-1 / (1 - x[m] ** 2))
    return out


def radial_source(F, d):
    return lambda r, z: z * np.asarray(r, dtype=float) ** (3 - d) * F(np.hypot(r, z))


def radial_potential(F, X, d, lo=0.0, hi=np.inf, points=None):
    b, S = beta_d(d), sphere_area(d + 3)
    f = lambda t: float(F(np.array([t]))[0])
    inside = integrate.quad(lambda t: f(t) * t ** (d + 3), lo, min(X, hi), epsabs=0, epsrel=1e-12,
                            limit=400, points=points)[0] if X > lo else 0.0
    outside = integrate.quad(lambda t: f(t) * t, max(X, lo), hi, epsabs=0, epsrel=1e-12, limit=400,
                             points=points)[0] if X < hi else 0.0
    return b * S * (X ** -(d + 2) * inside + outside) if X > 0 else b * S * outside


def radial_potential_slope(F, X, d, lo=0.0, hi=np.inf):
    """d psi0 / d|X| for the radial oracle."""
    b, S = beta_d(d), sphere_area(d + 3)
    f = lambda t: float(F(np.array([t]))[0])
    inside = integrate.quad(lambda t: f(t) * t ** (d + 3), lo, min(X, hi), epsabs=0, epsrel=1e-12, limit=400)[0]
    return -(d + 2) * b * S * X ** -(d + 3) * inside


# ---------------------------------------------------------------- constants

@pytest.mark.parametrize("d", range(3, 9))
def test_beta_identity(d):
    assert abs(beta_d(d) / beta_d_ball(d) - 1) <= 1e-14


def test_beta_three():
    assert ball_volume(7) == pytest.approx(16 * math.pi ** 3 / 105, rel=1e-15)
    assert beta_d(3) == pytest.approx(105 / (7 * 5 * 16 * math.pi ** 3), rel=1e-14)
    assert beta_d(3) == pytest.approx(6.0472e-3, abs=5e-8)


def test_inner_angular_examples():
    assert inner_angular(2.0, 1.0, 3) == pytest.approx(2 / 3 * (1 - 3 ** -1.5), rel=1e-15)
    assert inner_angular(2.0, 1.0, 3) == pytest.approx(0.538367, abs=5e-7)
    q = integrate.quad(lambda u: (2 - u) ** -2.5, -1, 1, epsabs=0, epsrel=1e-13)[0]
    assert inner_angular(2.0, 1.0, 3) == pytest.approx(q, rel=1e-12)
    assert inner_angular(1.0, 0.0, 3) == 2.0
    assert abs(inner_angular(1.0, 1e-12, 3) - 2) <= 1e-9
    with pytest.raises(DomainError):
        inner_angular(1.0, 1.0, 3)


@pytest.mark.parametrize("B", [1e-9, 1e-8, 2e-8, 1e-6, 0.3, 0.99])
def test_inner_angular_matches_quadrature(B):
    # the closed form cancels to ~eps/B just above the series switch
    tol = max(1e-12, 4e-16 / B)
    for d in (3, 4, 7):
        q = integrate.quad(lambda u: (1 - B * u) ** (-(d + 2) / 2), -1, 1, epsabs=0, epsrel=1e-13)[0]
        assert inner_angular(1.0, B, d) == pytest.approx(q, rel=tol)


def test_kernel_at_origin_target():
    v = reduced_kernel(0.0, 0.0, 1.0, 1.0, 3)
    assert v == pytest.approx(sphere_area(3) * 4 * math.pi * 2 ** -2.5, rel=1e-12)
    assert v == pytest.approx(43.8495, abs=5e-5)


def test_kernel_swap_symmetry():
    assert reduced_kernel(1, 2, 3, 4, 3, tol=1e-11) == pytest.approx(reduced_kernel(3, 4, 1, 2, 3, tol=1e-11),
                                                                      rel=1e-8)
    rng = np.random.default_rng(7)
    for _ in range(100):
        r, z, rho, zeta = np.exp(rng.uniform(-3, 3, 4))
        a = reduced_kernel(r, z, rho, zeta, 3, tol=1e-11)
        b = reduced_kernel(rho, zeta, r, z, 3, tol=1e-11)
        assert abs(a - b) <= 1e-8 * a


def test_kernel_monte_carlo_single_pair():
    k = reduced_kernel(1, 1, 1.5, 0.7, 3, tol=1e-11)
    m, se = kernel_monte_carlo(1, 1, 1.5, 0.7, 3, n=2_000_000, seed=4)
    assert abs(m - k) <= 3 * se


# ---------------------------------------------------------------- potential oracles

@pytest.fixture(scope="module")
def fine_rule(ref_params):
    # direct rule on a fine grid; cells continue below r = 0.01 so shells near the axes are whole
    g = build_grid(134, 134, 0.01, 2.0)
    return build_quadrature(g, ref_params, tables=False, m_out=0)


def shell_mass(F, lo, hi, d):
    return sphere_area(d + 3) * integrate.quad(lambda t: F(np.array([t]))[0] * t ** (d + 3), lo, hi,
                                               epsabs=0, epsrel=1e-13)[0]


def test_point_mass_far_field(ref_params, fine_rule):
    d = ref_params.d
    F = lambda t: bump(t, 0.1, 0.01)
    mass = shell_mass(F, 0.09, 0.11, d)
    rng = np.random.default_rng(0)
    rad = np.geomspace(1.0, 50.0, 20)
    ang = rng.uniform(0.05, 0.5 * math.pi - 0.05, 20)
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    v, _, _ = potential_at(radial_source(F, d), pts, ref_params, fine_rule)
    exact = beta_d(d) * mass * rad ** -(d + 2)
    assert np.max(np.abs(v / exact - 1)) <= 1e-4


def test_shell_inside_and_outside(ref_params, fine_rule):
    d = ref_params.d
    F = lambda t: bump(t, 1.0, 0.1)
    src = radial_source(F, d)
    inside = np.array([[0.3, 0.3], [0.1, 0.5], [0.5, 0.05], [0.02, 0.02]])
    outside = np.array([[1.5, 1.2], [2.5, 0.4], [0.2, 3.0], [0.9, 0.9]])
    vi, _, _ = potential_at(src, inside, ref_params, fine_rule)
    vo, _, _ = potential_at(src, outside, ref_params, fine_rule)
    ex_in = radial_potential(F, 0.0, d, 0.9, 1.1)
    ex_out = beta_d(d) * shell_mass(F, 0.9, 1.1, d) * np.hypot(outside[:, 0], outside[:, 1]) ** -(d + 2)
    assert np.max(np.abs(vi / ex_in - 1)) <= 1e-2
    assert np.max(np.abs(vo / ex_out - 1)) <= 1e-3


def test_mass_normalizer_shell(ref_params, fine_rule):
    d = ref_params.d
    F = lambda t: bump(t, 1.0, 0.1)
    src = radial_source(F, d)
    m = mass_normalizer(src, ref_params, fine_rule)
    assert m == pytest.approx(radial_potential(F, 0.0, d, 0.9, 1.1), rel=1e-3)
    assert m > 0
    assert mass_normalizer(lambda r, z: 3.7 * src(r, z), ref_params, fine_rule) == pytest.approx(3.7 * m, rel=1e-12)


def test_direct_gradient_against_differences(ref_params, fine_rule):
    src = radial_source(WIDE, ref_params.d)
    pts = np.array([[0.3, 0.4], [1.1, 0.2], [0.5, 1.5], [0.05, 0.9], [1.2, 1.2]])
    h = 1e-4
    _, gr, gz = potential_at(src, pts, ref_params, fine_rule, grad=True)
    shifted = np.concatenate([pts * [1 + h, 1], pts * [1 - h, 1], pts * [1, 1 + h], pts * [1, 1 - h]])
    v, _, _ = potential_at(src, shifted, ref_params, fine_rule)
    v = v.reshape(4, -1)
    fr = (v[0] - v[1]) / (2 * h * pts[:, 0])
    fz = (v[2] - v[3]) / (2 * h * pts[:, 1])
    scale = np.hypot(gr, gz)
    assert np.max(np.abs(fr - gr) / scale) <= 1e-4
    assert np.max(np.abs(fz - gz) / scale) <= 1e-4


# The tabulated route interpolates node values of Omega, so its oracle is a
# source the grid resolves: F = exp(-(ln t)^2) has width ~3 nodes at 64^2.

def table_errors(t, grid, d, reach=10.0, stride=4):
    R, Z = grid.mesh()
    X = np.hypot(R, Z)
    val, grad = [], []
    n = grid.shape[0]
    for i in range(0, n, stride):
        for j in range(0, n, stride):
            if X[i, j] > reach:
                continue
            ex = radial_potential(WIDE, X[i, j], d)
            s = radial_potential_slope(WIDE, X[i, j], d)
            val.append(abs(t.values[i, j] / ex - 1))
            if t.dr is not None:
                # gradient error in units of psi0 / |X|
                e = math.hypot(t.dr[i, j] - s * R[i, j] / X[i, j], t.dz[i, j] - s * Z[i, j] / X[i, j])
                grad.append(e * X[i, j] / ex)
    return max(val), max(grad) if grad else None



@pytest.fixture(scope="module")
def grid32():
    return build_grid(32, 32, 1e-3, 1e3)


@pytest.fixture(scope="module")
def quad32(ref_params, grid32):
    return build_quadrature(grid32, ref_params)


@pytest.fixture(scope="module")
def wide_tables64(ref_params, quad64):
    return potential_tables(radial_source(WIDE, ref_params.d), ref_params, quad64)


def test_mass_normalizer_tables(ref_params, quad64):
    src = radial_source(WIDE, ref_params.d)
    m = mass_normalizer(src, ref_params, quad64)
    assert m == pytest.approx(radial_potential(WIDE, 0.0, ref_params.d), rel=1e-3)
    assert mass_normalizer(lambda r, z: 3.7 * src(r, z), ref_params, quad64) == pytest.approx(3.7 * m, rel=1e-12)


def test_potential_tables_radial_oracle(ref_params, grid64, wide_tables64):
    val, grad = table_errors(wide_tables64, grid64, ref_params.d)
    assert val <= 1e-3
    assert grad <= 1e-2


def test_potential_tables_fourth_order(ref_params, grid32, quad32, grid64, wide_tables64):
    coarse = potential_tables(radial_source(WIDE, ref_params.d), ref_params, quad32)
    e32, _ = table_errors(coarse, grid32, ref_params.d, stride=2)
    e64, _ = table_errors(wide_tables64, grid64, ref_params.d, stride=4)
    assert e64 <= e32 / 8


def test_apply_elliptic_normalisation_and_scale_invariance(ref_params, quad32):
    src = radial_source(WIDE, ref_params.d)
    psi = apply_elliptic(src, ref_params, quad32)
    assert abs(psi.origin - ref_params.a) <= 1e-10
    psi2 = apply_elliptic(lambda r, z: 42.0 * src(r, z), ref_params, quad32)
    assert np.max(np.abs(psi2.values / psi.values - 1)) <= 1e-12
    assert np.max(np.abs(psi2.dr - psi.dr)) <= 1e-12 * np.max(np.abs(psi.dr))


def test_phi0_radial_properties(ref_params, quad32):
    src = radial_source(WIDE, ref_params.d)
    m = mass_normalizer(src, ref_params, quad32)
    assert phi0_radial(src, 0.0, ref_params, quad32) == pytest.approx(m, rel=1e-3)
    a, b, c = (phi0_radial(src, x, ref_params, quad32) for x in (1.0, 2.0, 4.0))
    assert a >= b >= c > 0
    # for a radial source Phi0 is the outer part of the shell-theorem formula
    assert b == pytest.approx(radial_potential(WIDE, 2.0, ref_params.d, lo=2.0), rel=1e-3)


def test_potential_eval_envelope_after_one_transport(ref_params, grid64, seed64, quad64):
    om = apply_transport(seed64, grid64, ref_params)
    psi0, (dr, dz) = potential_eval(om, ref_params, quad64)
    lo, hi = extract_envelope_constant(psi0, ref_params.decay)
    c1, c2 = 1 / lo, hi
    assert 0 < c1 <= c2 < np.inf
    assert dr.shape == grid64.shape
