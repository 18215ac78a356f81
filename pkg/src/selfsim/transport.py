"""Transport map psi -> Omega by characteristics.

In the stretched variables (R, Z) = (r, (mu + psi) z) the relative vorticity
is constant-coefficient transported along dR/ds = R, dZ/ds = h Z.  Each grid
node is traced back (or forward) to the unit arc R^2 + Z^2 = 1 where the
angular data Theta_lambda * chi is prescribed, and the value is assembled
from the hitting angle and the path integral J of Z dh/dZ.

The integration runs in log variables x = log R, y = log Z, so x is linear
in s and only y and the J-integral are stepped with the Dormand-Prince 5(4)
pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numba as nb
import numpy as np

from .errors import ConvergenceError, EventError, PositivityError, StepError, ProfileError
from .field import ScalarField, field_eval, fit_tail
from .params import ProfileParams, chi_window, THETA_KNEE

RTOL = 1e-10
ATOL = 1e-12
MAX_STEPS = 100_000
EVENT_TOL = 1e-12
MAX_NEWTON = 64

OK, E_STEPS, E_EVENT, E_INVERT, E_NAN, E_POS = 0, 1, 2, 3, 4, 5

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

# layout of the small parameter vector handed to the kernels
P_D, P_MU, P_A1, P_LAM, P_TEXP, P_CEXP, P_S1, P_S2, P_USEGRAD, P_RTOL, P_ATOL = range(11)


def _param_vector(params: ProfileParams, use_grad: bool, rtol=RTOL, atol=ATOL):
    s1, s2 = chi_window(params.d)
    return np.array([params.d, params.mu, params.a1, params.lam, params.theta_exponent,
                     params.chi_exponent, s1, s2, 1.0 if use_grad else 0.0, rtol, atol])


# ---------------------------------------------------------------- numba core

@nb.njit(cache=True)
def _smoothstep(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    e0 = math.exp(-1.0 / t)
    e1 = math.exp(-1.0 / (1.0 - t))
    return e0 / (e0 + e1)


@nb.njit(cache=True)
def log_theta(s, k):
    if s >= 1.0:
        return 0.0
    if s <= THETA_KNEE:
        return k * math.log(s)
    power = s ** k
    w = _smoothstep((s - THETA_KNEE) / (1.0 - THETA_KNEE))
    return math.log(power + w * (1.0 - power))


@nb.njit(cache=True)
def log_chi(sigma, cos_sigma, k, s1, s2):
    if sigma <= s1:
        return 0.0
    if sigma >= s2:
        return k * math.log(cos_sigma)
    eta = 1.0 - _smoothstep((sigma - s1) / (s2 - s1))
    return math.log(eta + (1.0 - eta) * cos_sigma ** k)


@nb.njit(cache=True)
def psi_triplet(pv, pr, pz, use_grad, r, z):
    """psi, d/dr psi, d/dz psi with gradient tables preferred inside the grid.

    In the strips next to the axis and the floor d/dz psi is blended into
    the d/dz table so that it stays continuous across the grid edges.
    """
    val, fr, fz = field_eval(pv[0], pv[1], pv[2], pv[3], r, z)
    if use_grad:
        meta = pv[0]
        r0 = math.exp(meta[0]) * (1.0 - 1e-12)
        z0 = math.exp(meta[2]) * (1.0 - 1e-12)
        if r > meta[11] or z > meta[12]:
            return val, fr, fz
        if r >= r0 and z >= z0:
            fr = field_eval(pr[0], pr[1], pr[2], pr[3], r, z)[0]
            fz = field_eval(pz[0], pz[1], pz[2], pz[3], r, z)[0]
        elif z >= z0:
            edge = field_eval(pz[0], pz[1], pz[2], pz[3], r0, z)[0]
            spl = field_eval(pv[0], pv[1], pv[2], pv[3], r0, z)[2]
            x = r / r0
            fz += x * x * (edge - spl)
        elif r >= r0:
            fz = z / z0 * field_eval(pz[0], pz[1], pz[2], pz[3], r, z0)[0]
    return val, fr, fz


@nb.njit(cache=True)
def invert_stretch(pv, R, Z, mu, a1, zguess):
    """Root z of (mu + psi(R, z)) z = Z by safeguarded Newton; returns (z, code)."""
    lo = Z / (mu + a1)
    hi = Z / mu
    glo = (mu + field_eval(pv[0], pv[1], pv[2], pv[3], R, lo)[0]) * lo - Z
    ghi = (mu + field_eval(pv[0], pv[1], pv[2], pv[3], R, hi)[0]) * hi - Z
    k = 0
    while glo > 0.0 and k < 60:
        lo *= 0.5
        glo = (mu + field_eval(pv[0], pv[1], pv[2], pv[3], R, lo)[0]) * lo - Z
        k += 1
    if ghi < 0.0:
        return hi, E_POS
    z = zguess
    if not (lo < z < hi):
        z = 0.5 * (lo + hi)
    for it in range(MAX_NEWTON):
        val, fr, fz = field_eval(pv[0], pv[1], pv[2], pv[3], R, z)
        g = (mu + val) * z - Z
        if val != val:
            return z, E_NAN
        if abs(g) <= 1e-13 * Z:
            return z, OK
        if g > 0.0:
            hi = z
        else:
            lo = z
        dg = mu + val + z * fz
        zn = z - g / dg if dg > 0.0 else 0.5 * (lo + hi)
        if not (lo < zn < hi):
            zn = 0.5 * (lo + hi)
        if abs(zn - z) <= 1e-15 * z:
            val = field_eval(pv[0], pv[1], pv[2], pv[3], R, zn)[0]
            if abs((mu + val) * zn - Z) <= 1e-12 * Z:
                return zn, OK
        z = zn
    return z, E_INVERT


@nb.njit(cache=True)
def slope_field(pv, pr, pz, prm, R, Z, zguess):
    """h, Z dh/dZ at (R, Z) plus the preimage z and an error code."""
    d = prm[P_D]
    mu = prm[P_MU]
    z, code = invert_stretch(pv, R, Z, mu, prm[P_A1], zguess)
    psi, fr, fz = psi_triplet(pv, pr, pz, prm[P_USEGRAD] != 0.0, R, z)
    h = (mu - (d - 1.0) * psi) / (mu + psi)
    zdz = z * fz
    zdzh = -d * mu * zdz / ((mu + psi + zdz) * (mu + psi))
    return h, zdzh, z, code


@nb.njit(cache=True)
def _rhs(pv, pr, pz, prm, x, y, zg):
    h, zdzh, z, code = slope_field(pv, pr, pz, prm, math.exp(x), math.exp(y), zg)
    return h, zdzh, z / math.exp(y), code


@nb.njit(cache=True)
def _rk_step(pv, pr, pz, prm, sgn, x, y, I, dt, kz, A, C, B5, E):
    """One DP5(4) step in tau (s = s0 + sgn tau).  Returns y, I, err, code, kz."""
    ky = np.empty(7)
    ki = np.empty(7)
    code = OK
    for st in range(7):
        ys = y
        for j in range(st):
            ys += dt * A[st, j] * ky[j]
        xs = x + sgn * C[st] * dt
        h, zdzh, kz_new, c = _rhs(pv, pr, pz, prm, xs, ys, kz * math.exp(ys))
        if c != OK:
            code = c
        kz = kz_new
        ky[st] = sgn * h
        ki[st] = zdzh
    yn = y
    In = I
    ey = 0.0
    ei = 0.0
    for st in range(7):
        yn += dt * B5[st] * ky[st]
        In += dt * B5[st] * ki[st]
        ey += dt * E[st] * ky[st]
        ei += dt * E[st] * ki[st]
    sc_y = prm[P_ATOL] + prm[P_RTOL] * max(abs(y), abs(yn))
    sc_i = prm[P_ATOL] + prm[P_RTOL] * max(abs(I), abs(In))
    err = max(abs(ey) / sc_y, abs(ei) / sc_i)
    return yn, In, err, code, kz


@nb.njit(cache=True)
def _event(x, y):
    # |Phi|^2 - 1 evaluated in a cancellation-friendly way
    return math.exp(2.0 * x) + math.exp(2.0 * y) - 1.0


@nb.njit(cache=True)
def trace_core(pv, pr, pz, prm, R, Z, A, C, B5, E, path):
    """Trace (R, Z) to the unit arc.

    Returns (s, x_hit, y_hit, I, nsteps, nstore, code) where s is the signed
    travel time from the arc to the target and I = int Z dh/dZ d(tau) along
    the traced path.  If ``path`` has rows, accepted steps are written to it
    as (tau, R, Z, h, Z dh/dZ) with tau the distance travelled from the
    target.
    """
    x = math.log(R)
    y = math.log(Z)
    f0 = _event(x, y)
    if abs(f0) <= 1e-15:
        return 0.0, x, y, 0.0, 0, 0, OK
    sgn = -1.0 if f0 > 0.0 else 1.0
    tau = 0.0
    I = 0.0
    kz = 1.0 / (prm[P_MU] + 0.5 * prm[P_A1])
    dt = 0.05
    cap = path.shape[0]
    nstore = 0
    if cap > 0:
        h0, g0, kz, c0 = _rhs(pv, pr, pz, prm, x, y, kz * Z)
        path[0, 0] = 0.0
        path[0, 1] = R
        path[0, 2] = Z
        path[0, 3] = h0
        path[0, 4] = g0
        nstore = 1
    for step in range(MAX_STEPS):
        yn, In, err, code, kz_n = _rk_step(pv, pr, pz, prm, sgn, x, y, I, dt, kz, A, C, B5, E)
        if code != OK:
            return 0.0, x, y, I, step, nstore, code
        if not (err == err):
            return 0.0, x, y, I, step, nstore, E_NAN
        if err > 1.0:
            dt *= max(0.2, 0.9 * err ** -0.2)
            continue
        xn = x + sgn * dt
        fn = _event(xn, yn)
        if (fn > 0.0) == (f0 > 0.0) and fn != 0.0:
            x = xn
            y = yn
            I = In
            kz = kz_n
            tau += dt
            if nstore < cap:
                hh, gg, kz2, c2 = _rhs(pv, pr, pz, prm, x, y, kz * math.exp(y))
                path[nstore, 0] = tau
                path[nstore, 1] = math.exp(x)
                path[nstore, 2] = math.exp(y)
                path[nstore, 3] = hh
                path[nstore, 4] = gg
                nstore += 1
            dt *= min(5.0, 0.9 * max(err, 1e-10) ** -0.2)
            continue
        # the arc lies inside this step: safeguarded Newton on the step length
        lo = 0.0
        hi = dt
        flo = f0
        t = dt * f0 / (f0 - fn)
        for it in range(200):
            yt, It, errt, code, kzt = _rk_step(pv, pr, pz, prm, sgn, x, y, I, t, kz, A, C, B5, E)
            if code != OK:
                return 0.0, x, y, I, step, nstore, code
            xt = x + sgn * t
            ft = _event(xt, yt)
            if abs(ft) <= EVENT_TOL:
                tau += t
                if nstore < cap:
                    path[nstore, 0] = tau
                    path[nstore, 1] = math.exp(xt)
                    path[nstore, 2] = math.exp(yt)
                    hh, gg, kz2, c2 = _rhs(pv, pr, pz, prm, xt, yt, kzt * math.exp(yt))
                    path[nstore, 3] = hh
                    path[nstore, 4] = gg
                    nstore += 1
                return -sgn * tau, xt, yt, It, step + 1, nstore, OK
            if (ft > 0.0) == (flo > 0.0):
                lo = t
                flo = ft
            else:
                hi = t
            h, zdzh, kzq, c = _rhs(pv, pr, pz, prm, xt, yt, kzt * math.exp(yt))
            dfdt = 2.0 * sgn * (math.exp(2.0 * xt) + h * math.exp(2.0 * yt))
            tn = t - ft / dfdt if dfdt != 0.0 else 0.5 * (lo + hi)
            if not (lo < tn < hi):
                tn = 0.5 * (lo + hi)
            if hi - lo < 1e-15 * max(1.0, tau):
                break
            t = tn
        return 0.0, x, y, I, step, nstore, E_EVENT
    return 0.0, x, y, I, MAX_STEPS, nstore, E_STEPS


@nb.njit(cache=True)
def log_omega_hat_from_trace(prm, R, Z, s, xh, yh, I):
    d = prm[P_D]
    mu = prm[P_MU]
    Rh = math.exp(xh)
    Zh = math.exp(yh)
    sigma = math.atan2(Rh, Zh)
    cs = Zh / math.hypot(Rh, Zh)
    J = -I / (d * mu) * (1.0 if s >= 0.0 else -1.0) if s != 0.0 else 0.0
    val = (-(d - 1.0) / (d * mu) * math.log(R) - math.log(Z) / (d * mu)
           + log_theta(prm[P_LAM] * sigma, prm[P_TEXP])
           + log_chi(sigma, cs, prm[P_CEXP], prm[P_S1], prm[P_S2]) + J)
    return val, sigma, J


@nb.njit(cache=True, parallel=True)
def tabulate_omega(pv, pr, pz, prm, rn, zn, A, C, B5, E):
    """log Omega at every grid node plus sigma, s, J and error codes."""
    nr = rn.shape[0]
    nz = zn.shape[0]
    logw = np.empty((nr, nz))
    sig = np.empty((nr, nz))
    ss = np.empty((nr, nz))
    JJ = np.empty((nr, nz))
    codes = np.zeros((nr, nz), dtype=np.int64)
    nsteps = np.zeros((nr, nz), dtype=np.int64)
    nopath = np.empty((0, 5))
    mu = prm[P_MU]
    for i in nb.prange(nr):
        for j in range(nz):
            r = rn[i]
            z = zn[j]
            psi = field_eval(pv[0], pv[1], pv[2], pv[3], r, z)[0]
            if not (psi > -mu):
                codes[i, j] = E_POS
                logw[i, j] = np.nan
                continue
            R = r
            Z = (mu + psi) * z
            s, xh, yh, I, n, ns, code = trace_core(pv, pr, pz, prm, R, Z, A, C, B5, E, nopath)
            codes[i, j] = code
            nsteps[i, j] = n
            if code != OK:
                logw[i, j] = np.nan
                continue
            lw, sg, J = log_omega_hat_from_trace(prm, R, Z, s, xh, yh, I)
            logw[i, j] = lw
            sig[i, j] = sg
            ss[i, j] = s
            JJ[i, j] = J
    return logw, sig, ss, JJ, codes, nsteps


# ---------------------------------------------------------------- python API

_ERRORS = {E_STEPS: StepError, E_EVENT: EventError, E_INVERT: ConvergenceError,
           E_NAN: ProfileError, E_POS: PositivityError}


def _raise(code, where):
    if code != OK:
        raise _ERRORS[code](f"characteristic tracing failed at {where} (code {code})")


@dataclass
class CharTrace:
    R: float
    Z: float
    sigma: float
    s: float
    J: float
    path: np.ndarray = dc_field(repr=False)   # columns s, R, Z, h, Z dh/dZ
    steps: int = 0

    @property
    def I_drift(self):
        """Integral of 1 - h along the stored path (trapezoid on the samples)."""
        p = self.path
        return float(np.trapezoid(1.0 - p[:, 3], p[:, 0])) if len(p) > 1 else 0.0


class Transport:
    """Bundle of a frozen psi snapshot with the packed arrays the kernels need.

    ``rtol``/``atol`` control the DP5(4) step acceptance of every trace.
    """

    def __init__(self, psi: ScalarField, params: ProfileParams, rtol=RTOL, atol=ATOL):
        self.psi = psi
        self.params = params
        self.use_grad = psi.dr is not None and psi.dz is not None
        self.pv = psi.pack("values")
        if self.use_grad:
            self.pr = psi.pack("dr")
            self.pz = psi.pack("dz")
        else:
            self.pr = self.pv
            self.pz = self.pv
        self.prm = _param_vector(params, self.use_grad, rtol, atol)

    def map_H(self, r, z):
        psi = self.psi(r, z)
        if np.any(psi <= 0):
            raise PositivityError("psi must be positive for the stretch map")
        return np.asarray(r, dtype=float) + 0 * psi, (self.params.mu + psi) * np.asarray(z, dtype=float)

    def invert_H(self, R, Z):
        p = self.params
        z, code = invert_stretch(self.pv, float(R), float(Z), p.mu, p.a1, float(Z) / (p.mu + p.a))
        _raise(code, (R, Z))
        return z

    def h_field(self, R, Z):
        h, zdzh, z, code = slope_field(self.pv, self.pr, self.pz, self.prm, float(R), float(Z),
                                       float(Z) / (self.params.mu + self.params.a))
        _raise(code, (R, Z))
        return h, zdzh

    def trace(self, R, Z, max_store=20000):
        R = float(R)
        Z = float(Z)
        path = np.zeros((max_store, 5))
        s, xh, yh, I, n, ns, code = trace_core(self.pv, self.pr, self.pz, self.prm, R, Z,
                                               _A, _C, _B5, _E, path)
        _raise(code, (R, Z))
        lw, sigma, J = log_omega_hat_from_trace(self.prm, R, Z, s, xh, yh, I)
        path = path[:ns].copy()
        # convert distance travelled into flow time measured from the arc
        path[:, 0] = s - math.copysign(1.0, s) * path[:, 0] if s != 0 else 0.0
        return CharTrace(R, Z, sigma, s, J, path[::-1].copy(), n)

    def log_omega_hat(self, R, Z):
        s, xh, yh, I, n, ns, code = trace_core(self.pv, self.pr, self.pz, self.prm, float(R), float(Z),
                                               _A, _C, _B5, _E, np.empty((0, 5)))
        _raise(code, (R, Z))
        return log_omega_hat_from_trace(self.prm, float(R), float(Z), s, xh, yh, I)[0]

    def omega_hat(self, R, Z):
        return math.exp(self.log_omega_hat(R, Z))

    def tabulate(self, grid):
        return tabulate_omega(self.pv, self.pr, self.pz, self.prm, grid.r_nodes, grid.z_nodes,
                              _A, _C, _B5, _E)


def map_H(psi, r, z, params):
    return Transport(psi, params).map_H(r, z)


def invert_H(psi, R, Z, params):
    return Transport(psi, params).invert_H(R, Z)


def h_field(psi, R, Z, params):
    return Transport(psi, params).h_field(R, Z)


def trace_characteristic(psi, R, Z, params):
    return Transport(psi, params).trace(R, Z)


def omega_hat(psi, R, Z, params):
    return Transport(psi, params).omega_hat(R, Z)


@dataclass
class TransportResult:
    omega: ScalarField
    sigma: np.ndarray
    s: np.ndarray
    J: np.ndarray
    steps: np.ndarray


def apply_transport(psi: ScalarField, grid, params: ProfileParams, details=False):
    """Tabulate Omega = Omega_hat o H_psi on ``grid`` (the map psi -> Omega)."""
    tr = Transport(psi, params)
    logw, sig, ss, JJ, codes, nsteps = tr.tabulate(grid)
    bad = codes != OK
    nbad = int(np.count_nonzero(bad))
    if nbad > 0.001 * codes.size:
        i, j = np.argwhere(bad)[0]
        _raise(int(codes[i, j]), (grid.r_nodes[i], grid.z_nodes[j]))
    if nbad:
        # isolated failures: fill from neighbours in log space
        good = ~bad
        for i, j in np.argwhere(bad):
            sl = (slice(max(i - 1, 0), i + 2), slice(max(j - 1, 0), j + 2))
            logw[i, j] = np.mean(logw[sl][good[sl]])
    omega = ScalarField(grid, np.exp(logw), kind="omega", delta=params.delta_d)
    omega = omega.with_tail(fit_tail(omega, anisotropic=True))
    if details:
        return TransportResult(omega, sig, ss, JJ, nsteps)
    return omega
