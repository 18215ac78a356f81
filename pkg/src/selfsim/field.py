"""Scalar functions on the closed quadrant r >= 0, z >= 0.

Values live on a geometric tensor grid.  Inside the grid they are
interpolated by a tensor cubic spline in (log r, log z); the spline is stored
in Hermite form (value, u-, v- and mixed derivative at every node) so the
numba evaluators below only need the local cell.

Between the first node and the coordinate axes two extension rules exist:

* ``even`` fields (psi and friends) are functions of r^2 and z^2.  They carry
  explicit tables on the axis r = 0, the floor z = 0 and at the origin, and
  are interpolated linearly in r^2 (resp. z^2) across the strip.
* ``omega`` fields vanish like r^delta near the axis and like z near the
  floor.

Beyond R_max (in either coordinate) the tail model takes over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numba as nb
import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, FitError, NaNError, PositivityError, TailError

KIND_EVEN, KIND_OMEGA = 0, 1
_KINDS = {"even": KIND_EVEN, "omega": KIND_OMEGA}

TAIL_FRACTION = 0.8        # R_tail = 0.8 R_max
FIT_LOG_FRACTION = 0.2     # fitting annulus: top 20% of the log-radius span
MIN_FIT_SAMPLES = 16


def bracket(r, z):
    """Japanese bracket (1 + r^2 + z^2)^(1/2)."""
    return np.sqrt(1.0 + np.asarray(r) ** 2 + np.asarray(z) ** 2)


@dataclass(frozen=True)
class QuadrantGrid:
    r_nodes: np.ndarray
    z_nodes: np.ndarray

    @property
    def shape(self):
        return len(self.r_nodes), len(self.z_nodes)

    @property
    def r_min(self):
        return float(self.r_nodes[0])

    @property
    def z_min(self):
        return float(self.z_nodes[0])

    @property
    def R_max(self):
        return float(self.r_nodes[-1])

    @property
    def ratio_r(self):
        return float(np.exp(np.log(self.r_nodes[-1] / self.r_nodes[0]) / (len(self.r_nodes) - 1)))

    @property
    def ratio_z(self):
        return float(np.exp(np.log(self.z_nodes[-1] / self.z_nodes[0]) / (len(self.z_nodes) - 1)))

    @property
    def R_tail(self):
        return TAIL_FRACTION * self.R_max

    @property
    def is_symmetric(self) -> bool:
        """Same node set on both axes (needed by the covariant kernel build)."""
        return len(self.r_nodes) == len(self.z_nodes) and np.array_equal(self.r_nodes, self.z_nodes)

    def mesh(self):
        return np.meshgrid(self.r_nodes, self.z_nodes, indexing="ij")

    def descriptor(self) -> dict:
        return {"N_r": len(self.r_nodes), "N_z": len(self.z_nodes),
                "r_min": self.r_min, "z_min": self.z_min, "R_max": self.R_max,
                "ratio_r": self.ratio_r, "ratio_z": self.ratio_z}


def _geometric(n, lo, hi):
    nodes = lo * np.exp(np.log(hi / lo) * np.arange(n) / (n - 1))
    nodes[0], nodes[-1] = lo, hi
    return nodes


def build_grid(N_r: int, N_z: int, r_min: float, R_max: float) -> QuadrantGrid:
    if int(N_r) != N_r or int(N_z) != N_z or N_r < 8 or N_z < 8:
        raise ConfigError(f"grid needs at least 8 nodes per axis, got {N_r}x{N_z}")
    if not (0 < r_min < 1 < R_max):
        raise ConfigError(f"need 0 < r_min < 1 < R_max, got r_min={r_min}, R_max={R_max}")
    return QuadrantGrid(_geometric(int(N_r), r_min, R_max), _geometric(int(N_z), r_min, R_max))


@dataclass(frozen=True)
class TailModel:
    c_tail: float
    p_tail: float
    anisotropic: bool = False
    R_tail: float = math.inf
    mismatch: float = 0.0   # max relative jump against the table at the grid edge

    def __call__(self, r, z):
        r = np.asarray(r, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.anisotropic:
            return self.c_tail * z * np.power(r * r + z * z, 0.5 * self.p_tail)
        return self.c_tail * np.power(1.0 + r * r + z * z, 0.5 * self.p_tail)


# ---------------------------------------------------------------- numba core

@nb.njit(cache=True, inline="always")
def _h00(t):
    return (2.0 * t - 3.0) * t * t + 1.0


@nb.njit(cache=True, inline="always")
def _h10(t):
    return ((t - 2.0) * t + 1.0) * t


@nb.njit(cache=True, inline="always")
def _h01(t):
    return (3.0 - 2.0 * t) * t * t


@nb.njit(cache=True, inline="always")
def _h11(t):
    return (t - 1.0) * t * t


@nb.njit(cache=True, inline="always")
def _d00(t):
    return 6.0 * t * (t - 1.0)


@nb.njit(cache=True, inline="always")
def _d10(t):
    return (3.0 * t - 4.0) * t + 1.0


@nb.njit(cache=True, inline="always")
def _d11(t):
    return (3.0 * t - 2.0) * t


@nb.njit(cache=True)
def _locate(x, x0, dx, n):
    y = (x - x0) / dx
    # snap log round-off so node queries hit the table exactly
    yr = math.floor(y + 0.5)
    if abs(y - yr) <= 1e-11:
        y = yr
    k = int(math.floor(y))
    if k < 0:
        k = 0
    if k > n - 2:
        k = n - 2
    return k, y - k


@nb.njit(cache=True)
def hermite1d(f, fd, x, x0, dx):
    """Value and x-derivative of a cubic Hermite spline on a uniform lattice."""
    n = f.shape[0]
    k, t = _locate(x, x0, dx, n)
    val = (_h00(t) * f[k] + _h10(t) * dx * fd[k]
           + _h01(t) * f[k + 1] + _h11(t) * dx * fd[k + 1])
    der = (_d00(t) * f[k] + _d10(t) * dx * fd[k]
           - _d00(t) * f[k + 1] + _d11(t) * dx * fd[k + 1]) / dx
    return val, der


@nb.njit(cache=True)
def hermite2d(C, u, v, u0, du, v0, dv):
    """Value, u- and v-derivative of a bicubic Hermite patch table C[4, nu, nv]."""
    nu = C.shape[1]
    nv = C.shape[2]
    i, t = _locate(u, u0, du, nu)
    j, s = _locate(v, v0, dv, nv)
    ht = (_h00(t), _h10(t) * du, _h01(t), _h11(t) * du)
    dt = (_d00(t) / du, _d10(t), -_d00(t) / du, _d11(t))
    hs = (_h00(s), _h10(s) * dv, _h01(s), _h11(s) * dv)
    ds = (_d00(s) / dv, _d10(s), -_d00(s) / dv, _d11(s))
    val = 0.0
    fu = 0.0
    fv = 0.0
    for p in range(2):
        for q in range(2):
            ii = i + p
            jj = j + q
            a0 = ht[2 * p]
            a1 = ht[2 * p + 1]
            b0 = hs[2 * q]
            b1 = hs[2 * q + 1]
            da0 = dt[2 * p]
            da1 = dt[2 * p + 1]
            db0 = ds[2 * q]
            db1 = ds[2 * q + 1]
            c0 = C[0, ii, jj]
            c1 = C[1, ii, jj]
            c2 = C[2, ii, jj]
            c3 = C[3, ii, jj]
            val += a0 * b0 * c0 + a1 * b0 * c1 + a0 * b1 * c2 + a1 * b1 * c3
            fu += da0 * b0 * c0 + da1 * b0 * c1 + da0 * b1 * c2 + da1 * b1 * c3
            fv += a0 * db0 * c0 + a1 * db0 * c1 + a0 * db1 * c2 + a1 * db1 * c3
    return val, fu, fv


# meta layout
M_U0, M_DU, M_V0, M_DV, M_KIND, M_DELTA, M_HASTAIL, M_TC, M_TP, M_TANISO, M_ORIGIN, M_RR, M_RZ = range(13)
META_LEN = 13


@nb.njit(cache=True)
def field_eval(meta, C, AX, FL, r, z):
    """(value, d/dr, d/dz) of a packed field at (r, z), r, z >= 0."""
    if r > meta[M_RR] or z > meta[M_RZ]:
        if meta[M_HASTAIL] == 0.0:
            return np.nan, np.nan, np.nan
        c = meta[M_TC]
        p = meta[M_TP]
        if meta[M_TANISO] != 0.0:
            rho2 = r * r + z * z
            g = rho2 ** (0.5 * p)
            val = c * z * g
            return val, c * z * p * r * g / rho2, c * g + c * z * p * z * g / rho2
        b2 = 1.0 + r * r + z * z
        g = b2 ** (0.5 * p)
        return c * g, c * p * r * g / b2, c * p * z * g / b2

    u0 = meta[M_U0]
    du = meta[M_DU]
    v0 = meta[M_V0]
    dv = meta[M_DV]
    r0 = math.exp(u0)
    z0 = math.exp(v0)
    kind = int(meta[M_KIND])
    delta = meta[M_DELTA]
    # exp(log(node)) may land an ulp above the first node
    in_r = r >= r0 * (1.0 - 1e-12)
    in_z = z >= z0 * (1.0 - 1e-12)
    if in_r and in_z:
        u = math.log(r)
        v = math.log(z)
        val, fu, fv = hermite2d(C, u, v, u0, du, v0, dv)
        return val, fu / r, fv / z
    if in_z:
        # strip next to the axis
        v = math.log(z)
        col, col_v = hermite1d(C[0, 0, :], C[2, 0, :], v, v0, dv)
        x = r / r0
        if kind == KIND_EVEN:
            ax, ax_v = hermite1d(AX[0], AX[1], v, v0, dv)
            s = x * x
            return ax + (col - ax) * s, 2.0 * r * (col - ax) / (r0 * r0), (ax_v + (col_v - ax_v) * s) / z
        g = x ** delta if delta != 0.0 else 1.0
        dr = 0.0
        if delta != 0.0 and r > 0.0:
            dr = delta * col * g / r
        return col * g, dr, col_v * g / z
    if in_r:
        # strip next to the floor
        u = math.log(r)
        row, row_u = hermite1d(C[0, :, 0], C[1, :, 0], u, u0, du)
        y = z / z0
        if kind == KIND_EVEN:
            fl, fl_u = hermite1d(FL[0], FL[1], u, u0, du)
            s = y * y
            return fl + (row - fl) * s, (fl_u + (row_u - fl_u) * s) / r, 2.0 * z * (row - fl) / (z0 * z0)
        return row * y, row_u * y / r, row / z0
    # corner cell touching the origin
    x = r / r0
    y = z / z0
    c11 = C[0, 0, 0]
    if kind == KIND_EVEN:
        c00 = meta[M_ORIGIN]
        c10 = FL[0, 0]
        c01 = AX[0, 0]
        s = x * x
        t = y * y
        val = c00 * (1 - s) * (1 - t) + c10 * s * (1 - t) + c01 * (1 - s) * t + c11 * s * t
        fs = (c10 - c00) * (1 - t) + (c11 - c01) * t
        ft = (c01 - c00) * (1 - s) + (c11 - c10) * s
        return val, fs * 2.0 * r / (r0 * r0), ft * 2.0 * z / (z0 * z0)
    g = x ** delta if delta != 0.0 else 1.0
    dr = 0.0
    if delta != 0.0 and r > 0.0:
        dr = delta * c11 * g * y / r
    return c11 * g * y, dr, c11 * g / z0


@nb.njit(cache=True)
def field_eval_many(meta, C, AX, FL, r, z):
    n = r.shape[0]
    out = np.empty((3, n))
    for k in range(n):
        a, b, c = field_eval(meta, C, AX, FL, r[k], z[k])
        out[0, k] = a
        out[1, k] = b
        out[2, k] = c
    return out


# ---------------------------------------------------------------- python side

def _spline_table(u, v, F):
    fu = CubicSpline(u, F, axis=0)(u, 1)
    fv = CubicSpline(v, F, axis=1)(v, 1)
    fuv = CubicSpline(v, fu, axis=1)(v, 1)
    return np.ascontiguousarray(np.stack([F, fu, fv, fuv]))


def _spline_1d(x, f):
    return np.ascontiguousarray(np.stack([f, CubicSpline(x, f)(x, 1)]))


@dataclass(eq=False)
class ScalarField:
    """Tabulated field with interpolation, edge laws and a tail model.

    ``dr``/``dz`` optionally hold separately computed derivative tables; they
    are interpolated on their own (see :meth:`gradient`).
    """

    grid: QuadrantGrid
    values: np.ndarray
    kind: str = "even"
    delta: int = 0
    axis: np.ndarray | None = None
    floor: np.ndarray | None = None
    origin: float | None = None
    tail: TailModel | None = None
    dr: np.ndarray | None = None
    dz: np.ndarray | None = None
    _packs: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown field kind {self.kind!r}")
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ConfigError(f"table shape {self.values.shape} does not match grid {self.grid.shape}")
        if self.kind == "even":
            self._fill_even_edges()

    # -- construction helpers
    @classmethod
    def from_function(cls, grid, func, kind="even", delta=0, tail=None, with_gradient=None):
        """Tabulate ``func(r, z)`` (vectorised) including the edge tables.

        ``with_gradient`` may be a callable returning (d/dr, d/dz)."""
        R, Z = grid.mesh()
        values = func(R, Z)
        kw = {}
        if kind == "even":
            kw = dict(axis=func(np.zeros_like(grid.z_nodes), grid.z_nodes),
                      floor=func(grid.r_nodes, np.zeros_like(grid.r_nodes)),
                      origin=float(func(np.zeros(1), np.zeros(1))[0]))
        if with_gradient is not None:
            kw["dr"], kw["dz"] = with_gradient(R, Z)
        return cls(grid, values, kind=kind, delta=delta, tail=tail, **kw)

    def _fill_even_edges(self):
        if self.axis is not None and self.floor is not None and self.origin is not None:
            self.axis = np.asarray(self.axis, dtype=float)
            self.floor = np.asarray(self.floor, dtype=float)
            self.origin = float(self.origin)
            return
        # quadratic even continuation from the first column/row
        C = _spline_table(np.log(self.grid.r_nodes), np.log(self.grid.z_nodes), self.values)
        if self.axis is None:
            self.axis = C[0, 0, :] - 0.5 * C[1, 0, :]
        if self.floor is None:
            self.floor = C[0, :, 0] - 0.5 * C[2, :, 0]
        if self.origin is None:
            ax = _spline_1d(np.log(self.grid.z_nodes), self.axis)
            self.origin = float(ax[0, 0] - 0.5 * ax[1, 0])

    def with_tail(self, tail):
        return ScalarField(self.grid, self.values, self.kind, self.delta, self.axis,
                           self.floor, self.origin, tail, self.dr, self.dz)

    def scaled(self, c):
        """c times the field, including edge and gradient tables."""
        tail = self.tail
        if tail is not None:
            tail = TailModel(tail.c_tail * c, tail.p_tail, tail.anisotropic, tail.R_tail, tail.mismatch)
        mul = (lambda x: None if x is None else c * np.asarray(x))
        return ScalarField(self.grid, c * self.values, self.kind, self.delta, mul(self.axis),
                           mul(self.floor), None if self.origin is None else c * self.origin,
                           tail, mul(self.dr), mul(self.dz))

    # -- packed representation for numba kernels
    def pack(self, which="values"):
        if which in self._packs:
            return self._packs[which]
        g = self.grid
        u = np.log(g.r_nodes)
        v = np.log(g.z_nodes)
        table = {"values": self.values, "dr": self.dr, "dz": self.dz}[which]
        if table is None:
            raise ConfigError(f"field has no {which} table")
        if not np.all(np.isfinite(table)):
            # keep NaNs so that only queries touching them fail
            pass
        meta = np.zeros(META_LEN)
        meta[M_U0], meta[M_DU] = u[0], (u[-1] - u[0]) / (len(u) - 1)
        meta[M_V0], meta[M_DV] = v[0], (v[-1] - v[0]) / (len(v) - 1)
        meta[M_KIND] = _KINDS[self.kind] if which == "values" else KIND_EVEN
        meta[M_DELTA] = self.delta
        meta[M_RR], meta[M_RZ] = g.r_nodes[-1], g.z_nodes[-1]
        if which == "values" and self.tail is not None:
            meta[M_HASTAIL] = 1.0
            meta[M_TC], meta[M_TP] = self.tail.c_tail, self.tail.p_tail
            meta[M_TANISO] = 1.0 if self.tail.anisotropic else 0.0
        C = _spline_table(u, v, table)
        if which == "values" and self.kind == "even":
            AX = _spline_1d(v, self.axis)
            FL = _spline_1d(u, self.floor)
            meta[M_ORIGIN] = self.origin
        else:
            # derivative tables use plain quadratic continuation at the edges
            AX = _spline_1d(v, C[0, 0, :] - 0.5 * C[1, 0, :])
            FL = _spline_1d(u, C[0, :, 0] - 0.5 * C[2, :, 0])
            meta[M_ORIGIN] = AX[0, 0] - 0.5 * AX[1, 0]
        packed = (meta, C, AX, FL)
        self._packs[which] = packed
        return packed

    # -- evaluation
    def _eval(self, r, z, which):
        r = np.atleast_1d(np.asarray(r, dtype=float)).ravel()
        z = np.atleast_1d(np.asarray(z, dtype=float)).ravel()
        r, z = np.broadcast_arrays(r, z)
        if np.any(r < 0) or np.any(z < 0):
            raise ConfigError("fields live on r >= 0, z >= 0")
        out = field_eval_many(*self.pack(which), np.ascontiguousarray(r), np.ascontiguousarray(z))
        if not np.all(np.isfinite(out)):
            bad = ~np.all(np.isfinite(out), axis=0)
            outside = (r > self.grid.R_max) | (z > self.grid.z_nodes[-1])
            if which == "values" and self.tail is None and np.any(bad & outside):
                raise TailError("query beyond the grid but the field has no tail model")
            raise NaNError(f"non-finite field data near (r, z) = ({r[bad][0]:.4g}, {z[bad][0]:.4g})")
        return out

    def __call__(self, r, z):
        shape = np.broadcast(np.asarray(r), np.asarray(z)).shape
        return self._eval(r, z, "values")[0].reshape(shape)

    def eval_with_derivs(self, r, z):
        shape = np.broadcast(np.asarray(r), np.asarray(z)).shape
        out = self._eval(r, z, "values")
        return tuple(o.reshape(shape) for o in out)

    def gradient(self, r, z):
        """(d/dr, d/dz) from the stored derivative tables, or the interpolant."""
        if self.dr is None or self.dz is None:
            _, fr, fz = self.eval_with_derivs(r, z)
            return fr, fz
        shape = np.broadcast(np.asarray(r), np.asarray(z)).shape
        inside = (np.asarray(r) >= self.grid.r_min) & (np.asarray(z) >= self.grid.z_min) \
            & (np.asarray(r) <= self.grid.R_max) & (np.asarray(z) <= self.grid.z_nodes[-1])
        _, fr, fz = self.eval_with_derivs(r, z)
        fr = np.array(fr, dtype=float).reshape(shape)
        fz = np.array(fz, dtype=float).reshape(shape)
        if np.any(inside):
            rr, zz = np.broadcast_arrays(np.asarray(r, float), np.asarray(z, float))
            fr[inside] = self._eval(rr[inside], zz[inside], "dr")[0]
            fz[inside] = self._eval(rr[inside], zz[inside], "dz")[0]
        return fr, fz


def eval_with_derivs(f: ScalarField, r, z):
    return f.eval_with_derivs(r, z)


# ---------------------------------------------------------------- tail fitting

def fit_annulus_mask(grid: QuadrantGrid) -> np.ndarray:
    R, Z = grid.mesh()
    rad = np.hypot(R, Z)
    lo = grid.R_max ** (1 - FIT_LOG_FRACTION) * grid.r_min ** FIT_LOG_FRACTION
    return (rad >= lo) & (rad <= grid.R_max)


def _angular_design(phi, degree=6):
    x = 4.0 * phi / np.pi - 1.0
    return np.polynomial.legendre.legvander(x, degree)[:, 1:]


def fit_tail(f: ScalarField, anisotropic: bool = False) -> TailModel:
    """Least-squares power law over the outer annulus.

    log|f| (or log|f/z| for anisotropic fields) is regressed on the log
    radius together with a smooth angular profile, so that angular structure
    does not leak into the exponent.
    """
    grid = f.grid
    R, Z = grid.mesh()
    mask = fit_annulus_mask(grid)
    vals = f.values[mask]
    r, z = R[mask], Z[mask]
    ok = np.isfinite(vals) & (vals > 0)
    if np.count_nonzero(ok) < MIN_FIT_SAMPLES:
        raise FitError(f"only {np.count_nonzero(ok)} usable samples in the fitting annulus")
    if not np.all(ok):
        raise FitError("non-positive values in the fitting annulus")
    if anisotropic:
        y = np.log(vals / z)
        x = np.log(np.hypot(r, z))
    else:
        y = np.log(vals)
        x = np.log(bracket(r, z))
    phi = np.arctan2(z, r)
    A = np.column_stack([np.ones_like(x), x, _angular_design(phi)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    p = float(coef[1])
    c = float(np.exp(np.mean(y - p * x)))
    tail = TailModel(c, p, anisotropic, grid.R_tail)
    # continuity against the table along the outer edges of the grid
    edge = np.concatenate([f.values[-1, :], f.values[:, -1]])
    er = np.concatenate([np.full(grid.shape[1], grid.R_max), grid.r_nodes])
    ez = np.concatenate([grid.z_nodes, np.full(grid.shape[0], grid.z_nodes[-1])])
    sel = np.hypot(er, ez) >= grid.R_tail
    model = tail(er[sel], ez[sel])
    mismatch = float(np.max(np.abs(model - edge[sel]) / np.abs(edge[sel])))
    return TailModel(c, p, anisotropic, grid.R_tail, mismatch)


def extract_envelope_constant(f: ScalarField, weight_exponent: float):
    """(M_low, M_high): sup of f/<X>^w and of <X>^w/f over the nodes."""
    if np.any(~(f.values > 0)):
        raise PositivityError("envelope constants need a strictly positive field")
    R, Z = f.grid.mesh()
    w = bracket(R, Z) ** weight_exponent
    return float(np.max(w / f.values)), float(np.max(f.values / w))
