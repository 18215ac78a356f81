"""Admissible parameter tuples and the angular data profiles.

A profile family is labelled by the dimension ``d``, the normalisation ``a``
(the value of psi at the origin), the scaling exponent ``mu`` and the
steepness ``lam`` of the angular data near the symmetry axis.  Everything
else (a1, gamma, gamma1, h_star, alpha_star, ...) is derived here once and
carried around in :class:`ProfileParams`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, RangeError

THETA_KNEE = 0.1


def a_bounds(d: int) -> tuple[float, float]:
    return 4.0 / ((4 * d - 3) * (d - 2)), 1.0 / ((d - 1) * (d - 2))


def mu_bounds(d: int, a: float) -> tuple[float, float]:
    a1 = 0.5 * a + 0.5 / ((d - 1) * (d - 2))
    return 0.5 * (d - 1) * a1 + 0.5 / (d - 2), 1.0 / (d - 2)


@dataclass(frozen=True)
class ProfileParams:
    d: int
    a: float
    mu: float
    lam: float
    a1: float
    gamma: float
    gamma1: float
    h_star: float
    alpha_star: float
    delta_d: int
    theta_exponent: float
    chi_exponent: float

    @property
    def decay(self) -> float:
        """Far-field exponent d-2-1/mu of psi (negative)."""
        return self.d - 2 - 1.0 / self.mu

    @property
    def gap(self) -> float:
        """The small positive number 1/mu - (d-2)."""
        return 1.0 / self.mu - (self.d - 2)

    @property
    def r_power(self) -> float:
        return (self.d - 1) / (self.d * self.mu)

    @property
    def z_power(self) -> float:
        return 1.0 / (self.d * self.mu)

    def as_dict(self) -> dict:
        return asdict(self)


def validate_and_derive(d: int, a: float, mu: float, lam: float = 10.0) -> ProfileParams:
    if int(d) != d or d < 3:
        raise RangeError("d", f"dimension must be an integer >= 3, got {d}")
    d = int(d)
    lo, hi = a_bounds(d)
    if not lo < a < hi:
        raise RangeError("a", f"need {lo:.6g} < a < {hi:.6g}, got {a}")
    if not 3.0 / (3 * d - 5) < (d - 1) * a:
        raise RangeError("a", f"need (d-1)a > 3/(3d-5) = {3.0 / (3 * d - 5):.6g}")
    mlo, mhi = mu_bounds(d, a)
    if not mlo < mu < mhi:
        raise RangeError("mu", f"need {mlo:.6g} < mu < {mhi:.6g}, got {mu}")
    if not lam > 1:
        raise RangeError("lambda", f"need lambda > 1, got {lam}")

    a1 = 0.5 * a + 0.5 / ((d - 1) * (d - 2))
    gamma = (mu + 1 - (d - 1) * a) / (mu + a)
    gamma1 = (mu + 1 - (d - 1) * a1) / (mu + a1)
    h_star = (d - 1) / 8.0 * (1.0 / ((d - 1) * (d - 2)) - a)
    alpha_star = d - 2 - 1.0 / (mu + a)
    delta_d = 1 if d % 2 == 0 else 0
    p = ProfileParams(
        d=d, a=float(a), mu=float(mu), lam=float(lam), a1=a1,
        gamma=gamma, gamma1=gamma1, h_star=h_star, alpha_star=alpha_star,
        delta_d=delta_d,
        theta_exponent=delta_d + (d - 1) / (d * mu),
        chi_exponent=1 + 1.0 / (d * mu),
    )
    # derived orderings that downstream estimates rely on
    assert (d - 1) / (d * mu) < gamma1 < gamma < d - 2, p
    assert 0 < h_star < 1 and 0 < alpha_star < 1, p
    return p


def smoothstep(t):
    """C-infinity monotone step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    out = np.where(t >= 1, 1.0, 0.0)
    mid = (t > 0) & (t < 1)
    if np.any(mid):
        tm = t[mid]
        e0 = np.exp(-1.0 / tm)
        e1 = np.exp(-1.0 / (1.0 - tm))
        out[mid] = e0 / (e0 + e1)
    return out if out.ndim else float(out)


def theta_eval(s, params: ProfileParams):
    """Angular profile near the axis: a power law below 1/10, one above 1."""
    s = np.asarray(s, dtype=float)
    if np.any(~(s > 0)):
        raise DomainError("theta_eval needs s > 0")
    k = params.theta_exponent
    power = np.power(np.minimum(s, 1.0), k)
    w = smoothstep((s - THETA_KNEE) / (1.0 - THETA_KNEE))
    out = np.where(s >= 1, 1.0, power + w * (1.0 - power))
    return out if out.ndim else float(out)


def theta_lambda(sigma, params: ProfileParams):
    return theta_eval(params.lam * np.asarray(sigma, dtype=float), params)


def chi_window(d: int) -> tuple[float, float]:
    return math.atan(2 * d), math.acos(1.0 / (3 * d))


def chi_eval(sigma, params: ProfileParams):
    """Angular profile near the plane; equals 1 away from it."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~((sigma > 0) & (sigma < 0.5 * math.pi))):
        raise DomainError("chi_eval needs 0 < sigma < pi/2")
    s1, s2 = chi_window(params.d)
    eta = 1.0 - smoothstep((sigma - s1) / (s2 - s1))
    out = eta + (1.0 - eta) * np.cos(sigma) ** params.chi_exponent
    return out if out.ndim else float(out)


class LambdaBound(NamedTuple):
    value: float
    exponent: float
    overflow: bool


def lambda_rigorous_raw(d: int, a: float, mu: float, M: float) -> LambdaBound:
    """8*exp(E) with E = (2/3)^(d-2-1/mu) d^2 M / ((1/mu-(d-2)) h_star)."""
    if not M > 1:
        raise DomainError("envelope constant M must exceed 1")
    h_star = (d - 1) / 8.0 * (1.0 / ((d - 1) * (d - 2)) - a)
    expo = (2.0 / 3.0) ** (d - 2 - 1.0 / mu) * d * d * M / ((1.0 / mu - (d - 2)) * h_star)
    if expo > math.log(np.finfo(float).max / 8.0):
        return LambdaBound(math.inf, expo, True)
    return LambdaBound(8.0 * math.exp(expo), expo, False)


def lambda_rigorous(params: ProfileParams, M: float) -> LambdaBound:
    return lambda_rigorous_raw(params.d, params.a, params.mu, M)
