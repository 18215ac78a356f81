"""Picard iteration psi <- G(F(psi)) and the physical output fields."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .elliptic import KernelQuadrature, apply_elliptic, build_quadrature
from .errors import ConfigError, DivergenceError
from .field import QuadrantGrid, ScalarField, TailModel, extract_envelope_constant, fit_tail
from .params import ProfileParams
from .transport import apply_transport

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3


@dataclass
class IterationRecord:
    k: int
    change_norm: float
    mass: float                 # psi0(0) of the Omega produced in this sweep
    envelope: float             # two-sided envelope constant M of the new psi
    seconds: float = 0.0

    def as_dict(self):
        return dict(k=self.k, change_norm=self.change_norm, M_frak=self.mass,
                    M_envelope=self.envelope, seconds=self.seconds)


@dataclass
class ProfileSolution:
    params: ProfileParams
    grid: QuadrantGrid
    psi: ScalarField
    omega: ScalarField
    c_star: float
    history: list = dc_field(default_factory=list)
    converged: bool = False
    tol: float = 0.0
    relax: float = 1.0
    seed: str = "power-law"
    transport: object = dc_field(default=None, repr=False)    # TransportResult of the last sweep
    quad: KernelQuadrature | None = dc_field(default=None, repr=False)
    residuals: dict = dc_field(default_factory=dict)
    verification: dict | None = None
    # the last sweep before relaxation: psi_source was fed to the transport
    # map and produced omega, psi_image = G(omega)
    psi_source: ScalarField | None = dc_field(default=None, repr=False)
    psi_image: ScalarField | None = dc_field(default=None, repr=False)

    @property
    def change_norms(self):
        return [h.change_norm for h in self.history]


def initialize_profile(params: ProfileParams, grid: QuadrantGrid) -> ScalarField:
    """The power-law seed a <r, z>^{d-2-1/mu} with exact gradient and edge tables."""
    a = params.a
    w = params.decay

    def f(r, z):
        return a * (1.0 + r * r + z * z) ** (0.5 * w)

    def grad(r, z):
        g = a * w * (1.0 + r * r + z * z) ** (0.5 * w - 1.0)
        return g * r, g * z

    return ScalarField.from_function(grid, f, kind="even", tail=TailModel(a, w), with_gradient=grad)


def resample_profile(psi: ScalarField, grid: QuadrantGrid) -> ScalarField:
    """Carry a stream function over to another grid, e.g. to seed a finer run."""
    def grad(r, z):
        _, fr, fz = psi.eval_with_derivs(r, z)
        return fr, fz

    return ScalarField.from_function(grid, psi, kind="even", tail=psi.tail, with_gradient=grad)


def stopping_mask(grid: QuadrantGrid):
    R, Z = grid.mesh()
    return np.sqrt(1.0 + R * R + Z * Z) <= grid.R_tail


def change_norm(new: ScalarField, old: ScalarField, mask=None) -> float:
    if mask is None:
        mask = stopping_mask(new.grid)
    return float(np.max(np.abs(new.values - old.values)[mask] / np.abs(old.values[mask])))


def relax_log(old: ScalarField, new: ScalarField, w: float) -> ScalarField:
    """Geometric blend old^{1-w} new^w, gradients by the product rule."""
    if w == 1.0:
        return new

    def blend(x, y):
        return np.exp((1.0 - w) * np.log(x) + w * np.log(y))

    vals = blend(old.values, new.values)
    dr = dz = None
    if old.dr is not None and new.dr is not None:
        dr = vals * ((1.0 - w) * old.dr / old.values + w * new.dr / new.values)
        dz = vals * ((1.0 - w) * old.dz / old.values + w * new.dz / new.values)
    origin = blend(np.array(old.origin), np.array(new.origin))
    out = ScalarField(new.grid, vals, kind="even", axis=blend(old.axis, new.axis),
                      floor=blend(old.floor, new.floor), origin=float(origin), dr=dr, dz=dz)
    return out.with_tail(fit_tail(out))


def iterate(params: ProfileParams, grid: QuadrantGrid, k_max: int = 10, tol: float = 5e-3,
            relax: float = 0.5, psi0: ScalarField | None = None, quad: KernelQuadrature | None = None,
            callback=None) -> ProfileSolution:
    """Run psi <- G(F(psi)) with log-space under-relaxation.

    Stops when the relative sup-change over <r, z> <= R_tail drops below
    ``tol`` or after ``k_max`` sweeps; the history is returned either way.
    ``callback(k, psi, omega)`` is invoked after every sweep.
    """
    if k_max < 1:
        raise ConfigError("k_max must be at least 1")
    if not tol > 0:
        raise ConfigError("tol must be positive")
    if not 0 < relax <= 1:
        raise ConfigError("relaxation factor must lie in (0, 1]")
    if quad is None:
        quad = build_quadrature(grid, params)
    psi = psi0 if psi0 is not None else initialize_profile(params, grid)
    mask = stopping_mask(grid)
    history = []
    converged = False
    omega = tres = image = source = None
    mass = float("nan")
    for k in range(1, k_max + 1):
        t0 = time.perf_counter()
        tres = apply_transport(psi, grid, params, details=True)
        omega = tres.omega
        image, mass = apply_elliptic(omega, params, quad, details=True)
        source = psi
        new = relax_log(psi, image, relax)
        dn = change_norm(new, psi, mask)
        M = max(extract_envelope_constant(new, params.decay))
        history.append(IterationRecord(k, dn, mass, M, time.perf_counter() - t0))
        log.info("sweep %d: change %.3e, mass %.6g, envelope %.4f", k, dn, mass, M)
        psi = new
        if callback is not None:
            callback(k, psi, omega)
        if not math.isfinite(dn) or dn > DIVERGENCE_LIMIT:
            raise DivergenceError(f"change norm {dn:g} at sweep {k}")
        if dn < tol:
            converged = True
            break
    return ProfileSolution(params=params, grid=grid, psi=psi, omega=omega, c_star=params.a / mass,
                           history=history, converged=converged, tol=tol, relax=relax,
                           transport=tres, quad=quad, psi_source=source, psi_image=image)


# ---------------------------------------------------------------- outputs

@dataclass
class OutputFields:
    U_r: np.ndarray
    U_z: np.ndarray
    omega_s: np.ndarray
    residuals: dict

    def mirrored(self, grid: QuadrantGrid):
        """Tables on z in (-z_max, z_max): U_r and omega_s odd in z, U_z even."""
        zs = np.concatenate([-grid.z_nodes[::-1], grid.z_nodes])
        odd = lambda t: np.concatenate([-t[:, ::-1], t], axis=1)
        even = lambda t: np.concatenate([t[:, ::-1], t], axis=1)
        return zs, odd(self.U_r), even(self.U_z), odd(self.omega_s)


def _summary(num, den, interior):
    rel = np.abs(num[interior]) / np.maximum(np.abs(den[interior]), 1e-300)
    return {"max": float(np.max(rel)), "median": float(np.median(rel))}


def _interior(grid, band=3):
    m = np.zeros(grid.shape, dtype=bool)
    m[band:-band, band:-band] = True
    return m


def _spline_partials(grid, table):
    f = ScalarField(grid, table)
    _, fr, fz = f.eval_with_derivs(*grid.mesh())
    return fr, fz


def _identity_residuals(psi, omega, c_star, d, step=1e-4, band=3):
    """Divergence and curl identities at cell midpoints.

    U is rebuilt from the interpolant of psi and differenced with a centred
    step in log r / log z, small enough that each stencil stays inside one
    interpolation cell.
    """
    g = psi.grid
    u = np.log(g.r_nodes)
    v = np.log(g.z_nodes)
    um = 0.5 * (u[1:] + u[:-1])[band:-band]
    vm = 0.5 * (v[1:] + v[:-1])[band:-band]
    R, Z = np.meshgrid(np.exp(um), np.exp(vm), indexing="ij")

    def vel(r, z):
        P, pr, pz = psi.eval_with_derivs(r, z)
        return r * (P + z * pz), -z * ((d - 1) * P + r * pr)

    e = math.exp(step)
    span = e - 1.0 / e
    (ur_p, uz_p), (ur_m, uz_m) = vel(R * e, Z), vel(R / e, Z)
    ar = ((R * e) ** (d - 2) * ur_p - (R / e) ** (d - 2) * ur_m) / (R * span)
    uz_r = (uz_p - uz_m) / (R * span)
    (ur_p, uz_p), (ur_m, uz_m) = vel(R, Z * e), vel(R, Z / e)
    bz = R ** (d - 2) * (uz_p - uz_m) / (Z * span)
    ur_z = (ur_p - ur_m) / (Z * span)
    every = np.ones(R.shape, dtype=bool)
    div = _summary(ar + bz, np.abs(ar) + np.abs(bz), every)
    ws = R ** (d - 2) * c_star * omega(R, Z)
    curl = _summary(uz_r - ur_z - ws, ws, every)
    return div, curl


def compute_outputs(sol: ProfileSolution) -> OutputFields:
    """U_r, U_z and omega_s on the grid plus the residual report.

    U_r = r (psi + z psi_z), U_z = -z ((d-1) psi + r psi_r), omega_s =
    r^{d-2} c_* Omega.  The velocity is built from psi_image = G(Omega), the
    stream function that Omega induces, so the curl and elliptic residuals
    compare matching pairs; the transport residual uses psi_source, the
    field that produced Omega.  Without a recorded sweep both fall back to
    sol.psi.
    """
    p = sol.params
    d = p.d
    g = sol.grid
    R, Z = g.mesh()
    psi = sol.psi_image if sol.psi_image is not None else sol.psi
    src = sol.psi_source if sol.psi_source is not None else sol.psi
    pr, pz = psi.dr, psi.dz
    if pr is None:
        _, pr, pz = psi.eval_with_derivs(R, Z)
    P = psi.values
    Ur = R * (P + Z * pz)
    Uz = -Z * ((d - 1) * P + R * pr)
    Om = sol.c_star * sol.omega.values
    ws = R ** (d - 2) * Om
    inner = _interior(g)

    div, curl = _identity_residuals(psi, sol.omega, sol.c_star, d)
    # elliptic residual from the gradient tables
    prr, _ = _spline_partials(g, pr)
    _, pzz = _spline_partials(g, pz)
    F = R ** (d - 3) * Om / Z
    lap = prr + d / R * pr + pzz + 2.0 / Z * pz
    ell = _summary(lap + F, F, inner)
    # transport equation for Omega in (r, z)
    _, Or, Oz = sol.omega.eval_with_derivs(R, Z)
    Ov = sol.omega.values
    S = src.values
    sr, sz = src.dr, src.dz
    if sr is None:
        _, sr, sz = src.eval_with_derivs(R, Z)
    tr = (p.mu + S + Z * sz) * R * Or + (p.mu - (d - 1) * S - R * sr) * Z * Oz + Ov
    scale = np.abs((p.mu + S + Z * sz) * R * Or) + np.abs((p.mu - (d - 1) * S - R * sr) * Z * Oz) + Ov
    trn = _summary(tr, scale, inner)
    residuals = {"divergence": div, "curl": curl, "elliptic": ell, "transport_pde": trn}
    sol.residuals = residuals
    return OutputFields(Ur, Uz, ws, residuals)
