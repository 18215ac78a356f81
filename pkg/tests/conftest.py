"""Shared fixtures.

The expensive solver runs are session-scoped so that the acceptance suite and
the module tests that need a real profile share them:

* ``diagnostic_run``: 10 sweeps at 64^2 with relaxation 0.5 from the
  power-law seed (the fixed-point diagnostic).
* ``converged64``: 64^2 iterated to tol 5e-3 with relaxation 0.25.
* ``converged96``: the same at 96^2, seeded with the 64^2 profile.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from selfsim.elliptic import build_quadrature
from selfsim.field import ScalarField, TailModel, build_grid
from selfsim.fixedpoint import compute_outputs, initialize_profile, iterate, resample_profile
from selfsim.params import validate_and_derive
from selfsim.verify import verify_solution

REF = dict(d=3, a=0.45, mu=0.98, lam=10.0)
TOL = 5e-3
CONVERGED_RELAX = 0.25
CONVERGED_KMAX = 30


def constant_field(grid, c):
    n_r, n_z = grid.shape
    return ScalarField(grid, np.full(grid.shape, c), axis=np.full(n_z, c), floor=np.full(n_r, c),
                       origin=c, dr=np.zeros(grid.shape), dz=np.zeros(grid.shape), tail=TailModel(c, 0.0))


@pytest.fixture(scope="session")
def ref_params():
    return validate_and_derive(**REF)


@pytest.fixture(scope="session")
def grid64():
    return build_grid(64, 64, 1e-3, 1e3)


@pytest.fixture(scope="session")
def grid96():
    return build_grid(96, 96, 1e-3, 1e3)


@pytest.fixture(scope="session")
def seed64(ref_params, grid64):
    return initialize_profile(ref_params, grid64)


@pytest.fixture(scope="session")
def quad64(ref_params, grid64):
    t0 = time.perf_counter()
    q = build_quadrature(grid64, ref_params)
    q.build_seconds = time.perf_counter() - t0
    return q


@pytest.fixture(scope="session")
def diagnostic_run(ref_params, grid64, quad64):
    t0 = time.perf_counter()
    sol = iterate(ref_params, grid64, k_max=10, tol=TOL, relax=0.5, quad=quad64)
    sol.wall = time.perf_counter() - t0
    return sol


class Profile:
    """A solved profile together with its outputs and verification report."""

    def __init__(self, sol, quad):
        self.sol = sol
        self.quad = quad
        self.outputs = compute_outputs(sol)
        t0 = time.perf_counter()
        self.report = verify_solution(sol, quad=quad, n_traces=100, n_pairs=20000, appendix=False)
        self.verify_seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def converged64(ref_params, grid64, quad64):
    sol = iterate(ref_params, grid64, k_max=CONVERGED_KMAX, tol=TOL, relax=CONVERGED_RELAX, quad=quad64)
    return Profile(sol, quad64)


@pytest.fixture(scope="session")
def converged96(ref_params, grid96, converged64):
    q = build_quadrature(grid96, ref_params)
    seed = resample_profile(converged64.sol.psi, grid96)
    sol = iterate(ref_params, grid96, k_max=CONVERGED_KMAX, tol=TOL, relax=CONVERGED_RELAX, quad=q, psi0=seed)
    return Profile(sol, q)


# ---------------------------------------------------------------- acceptance summary

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str):
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def rel(a, b):
    return abs(a - b) / abs(b)


def finite(*xs):
    return all(math.isfinite(x) for x in xs)
