"""Command line front end: solve, verify, export, trace, kernel-selftest.

Exit codes: 0 success, 2 configuration or bundle error, 3 numerical
failure, 4 a threshold-bearing check failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProfileError, RangeError
from .field import QuadrantGrid, ScalarField, TailModel, build_grid
from .params import ProfileParams, validate_and_derive

log = logging.getLogger("selfsim")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 2, 3, 4
THREADS_ENV = "SELFSIM_THREADS"
BUNDLE_FORMAT = "selfsim-bundle"
BUNDLE_VERSION = 1
TABLE_DTYPE = "<f8"


class BundleError(ConfigError):
    """A bundle directory is missing, malformed or fails its checksums."""


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    d: int
    a: float
    mu: float
    lam: float = 10.0
    relax: float = 0.5
    tol: float = 5e-3
    k_max: int = 10
    N_r: int = 64
    N_z: int = 64
    r_min: float = 1e-3
    R_max: float = 1e3
    theta_tol: float = 1e-8
    mc_seed: int = 0
    mc_samples: int = 10_000_000
    directory: str = "bundle"
    snapshot_every: int = 0
    formats: list = dc_field(default_factory=lambda: ["csv"])
    verify_traces: int = 100
    verify_pairs: int = 20000
    verify_seed: int = 0

    def to_dict(self):
        return {
            "params": {"d": self.d, "a": self.a, "mu": self.mu, "lambda": self.lam, "relax": self.relax,
                       "tol": self.tol, "k_max": self.k_max},
            "grid": {"N_r": self.N_r, "N_z": self.N_z, "r_min": self.r_min, "R_max": self.R_max},
            "quadrature": {"theta_tol": self.theta_tol, "mc_seed": self.mc_seed, "mc_samples": self.mc_samples},
            "output": {"directory": self.directory, "snapshot_every": self.snapshot_every,
                       "formats": list(self.formats)},
            "verify": {"traces": self.verify_traces, "pairs": self.verify_pairs, "seed": self.verify_seed},
        }


# block -> {json key: (attribute, type)}
_SCHEMA = {
    "params": {"d": ("d", int), "a": ("a", float), "mu": ("mu", float), "lambda": ("lam", float),
               "relax": ("relax", float), "tol": ("tol", float), "k_max": ("k_max", int)},
    "grid": {"N_r": ("N_r", int), "N_z": ("N_z", int), "r_min": ("r_min", float), "R_max": ("R_max", float)},
    "quadrature": {"theta_tol": ("theta_tol", float), "mc_seed": ("mc_seed", int),
                   "mc_samples": ("mc_samples", int)},
    "output": {"directory": ("directory", str), "snapshot_every": ("snapshot_every", int),
               "formats": ("formats", list)},
    "verify": {"traces": ("verify_traces", int), "pairs": ("verify_pairs", int), "seed": ("verify_seed", int)},
}
REQUIRED = ("d", "a", "mu")


def _coerce(key, value, typ):
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is list:
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; d, a and mu may sit in "params" or at top level."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    flat = {k: doc.pop(k) for k in list(doc) if k in _SCHEMA["params"]}
    kw = {}
    for block, keys in _SCHEMA.items():
        sub = doc.pop(block, {})
        if block == "params":
            sub = {**flat, **sub}
        if not isinstance(sub, dict):
            raise ConfigError(f"{block}: expected an object")
        for k, v in sub.items():
            if k not in keys:
                raise ConfigError(f"{block}.{k}: unknown field")
            attr, typ = keys[k]
            kw[attr] = _coerce(f"{block}.{k}", v, typ)
    if doc:
        raise ConfigError(f"unknown config block(s): {', '.join(sorted(doc))}")
    for name in REQUIRED:
        if name not in kw:
            raise ConfigError(f"params.{name}: required field is missing")
    cfg = RunConfig(**kw)
    if cfg.k_max < 1:
        raise ConfigError("params.k_max: must be at least 1")
    if not cfg.tol > 0:
        raise ConfigError("params.tol: must be positive")
    if not 0 < cfg.relax <= 1:
        raise ConfigError("params.relax: must lie in (0, 1]")
    if cfg.N_r != cfg.N_z:
        raise ConfigError("grid: the kernel quadrature needs N_r == N_z")
    if cfg.snapshot_every < 0:
        raise ConfigError("output.snapshot_every: must be >= 0")
    bad = set(cfg.formats) - {"csv", "json"}
    if bad:
        raise ConfigError(f"output.formats: unknown format(s) {sorted(bad)}")
    if cfg.verify_traces < 1 or cfg.verify_pairs < 1:
        raise ConfigError("verify: traces and pairs must be positive")
    if cfg.mc_samples < 1 or not cfg.theta_tol > 0:
        raise ConfigError("quadrature: mc_samples and theta_tol must be positive")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc)


def make_params(cfg: RunConfig) -> ProfileParams:
    return validate_and_derive(cfg.d, cfg.a, cfg.mu, cfg.lam)


def make_grid(cfg: RunConfig) -> QuadrantGrid:
    return build_grid(cfg.N_r, cfg.N_z, cfg.r_min, cfg.R_max)


# ---------------------------------------------------------------- bundle I/O

def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def write_table(directory: Path, name: str, array) -> dict:
    a = np.ascontiguousarray(np.asarray(array, dtype=TABLE_DTYPE))
    buf = a.tobytes(order="C")
    fname = f"{name}.f64"
    (directory / fname).write_bytes(buf)
    return {"file": fname, "shape": list(a.shape), "dtype": TABLE_DTYPE, "order": "C", "sha256": _sha256(buf)}


def read_table(directory: Path, name: str, entry: dict) -> np.ndarray:
    path = directory / entry["file"]
    try:
        buf = path.read_bytes()
    except OSError:
        raise BundleError(f"table {name}: cannot read {path}") from None
    if _sha256(buf) != entry["sha256"]:
        raise BundleError(f"table {name}: checksum mismatch in {path}")
    shape = tuple(entry["shape"])
    a = np.frombuffer(buf, dtype=entry.get("dtype", TABLE_DTYPE))
    if a.size != int(np.prod(shape)):
        raise BundleError(f"table {name}: {a.size} values, header says {shape}")
    return a.reshape(shape).astype(float)


def _field_header(f: ScalarField):
    return {"kind": f.kind, "delta": f.delta, "origin": f.origin,
            "tail": asdict(f.tail) if f.tail is not None else None}


def _put_field(tables, fields, name, f: ScalarField):
    if f is None:
        return
    tables[name] = f.values
    for part in ("axis", "floor", "dr", "dz"):
        v = getattr(f, part)
        if v is not None:
            tables[f"{name}.{part}"] = v
    fields[name] = _field_header(f)


def _get_field(grid, tables, fields, name):
    if name not in fields:
        return None
    h = fields[name]
    parts = {p: tables.get(f"{name}.{p}") for p in ("axis", "floor", "dr", "dz")}
    tail = TailModel(**h["tail"]) if h["tail"] is not None else None
    return ScalarField(grid, tables[name], kind=h["kind"], delta=h["delta"], origin=h["origin"],
                       tail=tail, **parts)


def save_bundle(directory, sol, outputs=None, config: RunConfig | None = None, report=None,
                verify_settings=None):
    """Write a solution bundle; returns the manifest dict."""
    from .fixedpoint import compute_outputs

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if outputs is None:
        outputs = compute_outputs(sol)
    g = sol.grid
    tables = {"grid.r_nodes": g.r_nodes, "grid.z_nodes": g.z_nodes,
              "U_r": outputs.U_r, "U_z": outputs.U_z, "omega_s": outputs.omega_s}
    fields = {}
    _put_field(tables, fields, "psi", sol.psi)
    _put_field(tables, fields, "omega", sol.omega)
    _put_field(tables, fields, "psi_image", sol.psi_image)
    _put_field(tables, fields, "psi_source", sol.psi_source)
    if sol.transport is not None:
        for part in ("sigma", "s", "J"):
            tables[f"transport.{part}"] = getattr(sol.transport, part)
    entries = {name: write_table(directory, name, arr) for name, arr in tables.items()}
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "params": asdict(sol.params),
        "derived": {"decay": sol.params.decay, "gap": sol.params.gap},
        "grid": g.descriptor(),
        "config": config.to_dict() if config is not None else None,
        "solution": {"c_star": sol.c_star, "converged": sol.converged, "tol": sol.tol, "relax": sol.relax,
                     "seed": sol.seed},
        "history": [h.as_dict() for h in sol.history],
        "residuals": outputs.residuals,
        "fields": fields,
        "tables": entries,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    _write_history_csv(directory / "history.csv", sol.history)
    if report is not None:
        write_report(directory, report, verify_settings or {})
    return manifest


def write_report(directory, report, settings):
    doc = {"settings": settings, "digest": report.digest(), "report": report.to_dict()}
    with open(Path(directory) / "verification.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    (Path(directory) / "verification.txt").write_text(report.table() + "\n")


def _write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "change_norm", "M_frak", "M_envelope"])
        for h in history:
            d = h.as_dict()
            w.writerow([d["k"], repr(d["change_norm"]), repr(d["M_frak"]), repr(d["M_envelope"])])


def read_manifest(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise BundleError(f"bundle {directory} does not exist")
    try:
        with open(directory / "manifest.json") as fh:
            m = json.load(fh)
    except OSError:
        raise BundleError(f"bundle {directory} has no readable manifest.json") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"bundle manifest is not valid JSON: {exc}") from None
    if m.get("format") != BUNDLE_FORMAT or m.get("version") != BUNDLE_VERSION:
        raise BundleError(f"{directory} is not a version {BUNDLE_VERSION} solution bundle")
    return m


def load_bundle(directory):
    """Rebuild the ProfileSolution stored in a bundle (tables bit-identical)."""
    from .fixedpoint import IterationRecord, ProfileSolution
    from .transport import TransportResult

    directory = Path(directory)
    m = read_manifest(directory)
    tables = {name: read_table(directory, name, e) for name, e in m["tables"].items()}
    params = ProfileParams(**m["params"])
    grid = QuadrantGrid(tables["grid.r_nodes"], tables["grid.z_nodes"])
    fields = m["fields"]
    psi = _get_field(grid, tables, fields, "psi")
    omega = _get_field(grid, tables, fields, "omega")
    tres = None
    if "transport.J" in tables:
        tres = TransportResult(omega, tables["transport.sigma"], tables["transport.s"], tables["transport.J"],
                               None)
    hist = [IterationRecord(h["k"], h["change_norm"], h["M_frak"], h["M_envelope"], h.get("seconds", 0.0))
            for h in m["history"]]
    s = m["solution"]
    sol = ProfileSolution(params=params, grid=grid, psi=psi, omega=omega, c_star=s["c_star"], history=hist,
                          converged=s["converged"], tol=s["tol"], relax=s["relax"], seed=s["seed"],
                          transport=tres, residuals=m["residuals"],
                          psi_source=_get_field(grid, tables, fields, "psi_source"),
                          psi_image=_get_field(grid, tables, fields, "psi_image"))
    return sol, tables, m


def read_report(directory):
    path = Path(directory) / "verification.json"
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- tabular output

def _emit(rows, columns, fmt, out):
    """Write ``rows`` to the path ``out`` (or stdout when None) as csv or json."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        text = buf.getvalue()
    else:
        text = json.dumps({"columns": list(columns), "rows": [list(r) for r in rows]}, default=float)
    if out is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(out).write_text(text)


def field_rows(grid: QuadrantGrid, table):
    R, Z = grid.mesh()
    return [(float(r), float(z), float(v)) for r, z, v in zip(R.ravel(), Z.ravel(), np.asarray(table).ravel())]


def trace_rows(psi, params, points):
    """Characteristic paths through physical points (r, z)."""
    from .transport import Transport

    tr = Transport(psi, params)
    rows = []
    for k, (r, z) in enumerate(points):
        R, Z = tr.map_H(float(r), float(z))
        t = tr.trace(float(R), float(Z))
        for s, Rk, Zk, h, zdh in t.path:
            rows.append((k, float(r), float(z), float(s), float(Rk), float(Zk), float(h), float(zdh)))
        if not len(t.path):
            h, zdh = tr.h_field(R, Z)
            rows.append((k, float(r), float(z), 0.0, float(R), float(Z), float(h), float(zdh)))
    return rows


TRACE_COLUMNS = ("trace", "r", "z", "s", "R", "Z", "h", "Z_dh_dZ")


def default_trace_points(grid, n=100, seed=0):
    rng = np.random.default_rng(seed)
    ii = rng.integers(0, grid.shape[0], n)
    jj = rng.integers(0, grid.shape[1], n)
    return [(grid.r_nodes[i], grid.z_nodes[j]) for i, j in zip(ii, jj)]


def kernel_selftest(d=3, pairs=10, samples=10_000_000, seed=0, tol=1e-8):
    """Reduced kernel against plain Monte Carlo at random well-separated pairs."""
    from .elliptic import kernel_monte_carlo, reduced_kernel

    rng = np.random.default_rng(seed)
    rows = []
    while len(rows) < pairs:
        r, z, rho, zeta = np.exp(rng.uniform(math.log(0.2), math.log(5.0), 4))
        if math.hypot(r - rho, z - zeta) < 0.5:
            continue
        quad = reduced_kernel(r, z, rho, zeta, d, tol=tol)
        mc, se = kernel_monte_carlo(r, z, rho, zeta, d, n=samples, seed=int(rng.integers(2 ** 31)))
        rows.append((float(r), float(z), float(rho), float(zeta), quad, mc, se, abs(quad - mc) / se))
    return rows


SELFTEST_COLUMNS = ("r", "z", "rho", "zeta", "quadrature", "monte_carlo", "std_error", "z_score")


# ---------------------------------------------------------------- subcommands

def run_solve(cfg: RunConfig, out=None, quiet=False):
    """iterate + compute_outputs + full verification, then write the bundle."""
    from .elliptic import build_quadrature
    from .fixedpoint import compute_outputs, iterate
    from .verify import verify_solution

    params = make_params(cfg)
    grid = make_grid(cfg)
    out = Path(out if out is not None else cfg.directory)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    quad = build_quadrature(grid, params)
    log.info("kernel quadrature: %d points in %.1f s", quad.points, time.perf_counter() - t0)

    callback = None
    if cfg.snapshot_every:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)

        def callback(k, psi, omega):
            if k % cfg.snapshot_every == 0:
                write_table(snap, f"psi_{k:03d}", psi.values)
                write_table(snap, f"omega_{k:03d}", omega.values)

    sol = iterate(params, grid, k_max=cfg.k_max, tol=cfg.tol, relax=cfg.relax, quad=quad, callback=callback)
    outputs = compute_outputs(sol)
    settings = {"traces": cfg.verify_traces, "pairs": cfg.verify_pairs, "seed": cfg.verify_seed}
    report = verify_solution(sol, quad=quad, n_traces=cfg.verify_traces, n_pairs=cfg.verify_pairs,
                             seed=cfg.verify_seed)
    save_bundle(out, sol, outputs, cfg, report, settings)
    for fmt in cfg.formats:
        export_bundle(out, "history", fmt, out / "export")
        export_bundle(out, "fields", fmt, out / "export")
    if not quiet:
        print(f"change norms: {', '.join(f'{c:.3e}' for c in sol.change_norms)}")
        print(f"converged: {sol.converged}  c_star: {sol.c_star:.6g}")
        print(report.table())
        print(f"bundle written to {out}")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def run_verify(bundle, use_quadrature=True, quiet=False):
    """Re-run verification on stored fields; no transport or potential sweep."""
    from .elliptic import build_quadrature
    from .verify import verify_solution

    sol, _, manifest = load_bundle(bundle)
    stored = read_report(bundle)
    settings = stored["settings"] if stored else {"traces": 100, "pairs": 20000, "seed": 0}
    quad = build_quadrature(sol.grid, sol.params) if use_quadrature else None
    report = verify_solution(sol, quad=quad, n_traces=settings["traces"], n_pairs=settings["pairs"],
                             seed=settings["seed"])
    status = EXIT_OK if report.passed else EXIT_THRESHOLD
    if not quiet:
        print(report.table())
    if stored is not None and use_quadrature:
        same = report.digest() == stored["digest"]
        print(f"stored report reproduced: {'yes' if same else 'NO'}")
        if not same:
            return EXIT_NUMERIC
    return status


EXPORTS = ("fields", "traces", "kernel-selftest", "history")
FIELD_TABLES = ("psi", "omega", "U_r", "U_z", "omega_s")


def export_bundle(bundle, what, fmt="csv", out_dir=None, samples=10_000_000, seed=0):
    """Write plot-ready tables for ``what``; returns the written paths."""
    if what not in EXPORTS:
        raise ConfigError(f"unknown export selector {what!r}; choose from {', '.join(EXPORTS)}")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown export format {fmt!r}")
    bundle = Path(bundle)
    out_dir = Path(out_dir) if out_dir is not None else bundle / "export"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if what == "history":
        m = read_manifest(bundle)
        rows = [(h["k"], h["change_norm"], h["M_frak"], h["M_envelope"]) for h in m["history"]]
        path = out_dir / f"history.{fmt}"
        _emit(rows, ("k", "change_norm", "M_frak", "M_envelope"), fmt, path)
        written.append(path)
    elif what == "fields":
        sol, tables, _ = load_bundle(bundle)
        for name in FIELD_TABLES:
            path = out_dir / f"{name}.{fmt}"
            _emit(field_rows(sol.grid, tables[name]), ("r", "z", "value"), fmt, path)
            written.append(path)
    elif what == "traces":
        sol, _, _ = load_bundle(bundle)
        src = sol.psi_source if sol.psi_source is not None else sol.psi
        rows = trace_rows(src, sol.params, default_trace_points(sol.grid, seed=seed))
        path = out_dir / f"traces.{fmt}"
        _emit(rows, TRACE_COLUMNS, fmt, path)
        written.append(path)
    else:
        m = read_manifest(bundle)
        q = (m.get("config") or {}).get("quadrature", {})
        rows = kernel_selftest(m["params"]["d"], samples=q.get("mc_samples", samples), seed=q.get("mc_seed", seed),
                               tol=q.get("theta_tol", 1e-8))
        path = out_dir / f"kernel_selftest.{fmt}"
        _emit(rows, SELFTEST_COLUMNS, fmt, path)
        written.append(path)
    return written


def _read_points(path):
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        pts = [(float(p[0]), float(p[1])) for p in doc]
    except (json.JSONDecodeError, TypeError, IndexError, ValueError):
        pts = []
        for row in csv.reader(io.StringIO(text)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if pts:
                    raise ConfigError(f"bad point row {row!r} in {path}") from None
    if not pts:
        raise ConfigError(f"no points found in {path}")
    return pts


# ---------------------------------------------------------------- argument parsing

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="selfsim", description=__doc__.splitlines()[0], formatter_class=fmt)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every sweep")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="iterate to a profile, verify it and write a bundle", formatter_class=fmt)
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("-o", "--out", default=None, help="bundle directory (default: output.directory)")
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("verify", help="re-run the verification report on a bundle", formatter_class=fmt)
    p.add_argument("bundle")
    p.add_argument("--no-quadrature", action="store_true",
                   help="skip the kernel build (the radial comparison is then reported as skipped)")
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("export", help="write plot-ready tables from a bundle", formatter_class=fmt)
    p.add_argument("bundle")
    p.add_argument("what", help=f"one of {', '.join(EXPORTS)}")
    p.add_argument("-f", "--format", default="csv", help="csv or json")
    p.add_argument("-o", "--out", default=None, help="output directory (default: BUNDLE/export)")

    p = sub.add_parser("trace", help="dump characteristics through points (r, z)", formatter_class=fmt)
    p.add_argument("bundle")
    p.add_argument("--point", nargs=2, type=float, action="append", metavar=("R", "Z"), default=[])
    p.add_argument("--points", default=None, help="JSON list of [r, z] pairs or a two-column CSV file")
    p.add_argument("-f", "--format", default="csv", help="csv or json")
    p.add_argument("-o", "--out", default=None, help="output file (default: stdout)")

    p = sub.add_parser("kernel-selftest", help="reduced kernel against Monte Carlo", formatter_class=fmt)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--samples", type=int, default=10_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigmas", type=float, default=3.0, help="allowed deviation in standard errors")
    p.add_argument("-f", "--format", default="csv", help="csv or json")
    p.add_argument("-o", "--out", default=None, help="output file (default: stdout)")
    return ap


def apply_thread_override():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    import numba

    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"{THREADS_ENV}={n} outside 1..{numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(n)
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_thread_override()
        if args.command == "solve":
            return run_solve(load_config(args.config), args.out, args.quiet)
        if args.command == "verify":
            return run_verify(args.bundle, not args.no_quadrature, args.quiet)
        if args.command == "export":
            for path in export_bundle(args.bundle, args.what, args.format, args.out):
                print(path)
            return EXIT_OK
        if args.command == "trace":
            if args.format not in ("csv", "json"):
                raise ConfigError(f"unknown format {args.format!r}")
            pts = [tuple(p) for p in args.point]
            if args.points:
                pts += _read_points(args.points)
            if not pts:
                raise ConfigError("give at least one --point or a --points file")
            sol, _, _ = load_bundle(args.bundle)
            src = sol.psi_source if sol.psi_source is not None else sol.psi
            _emit(trace_rows(src, sol.params, pts), TRACE_COLUMNS, args.format, args.out)
            return EXIT_OK
        if args.command == "kernel-selftest":
            if args.format not in ("csv", "json"):
                raise ConfigError(f"unknown format {args.format!r}")
            if args.pairs < 1 or args.samples < 1:
                raise ConfigError("--pairs and --samples must be positive")
            rows = kernel_selftest(args.d, args.pairs, args.samples, args.seed)
            _emit(rows, SELFTEST_COLUMNS, args.format, args.out)
            worst = max(r[-1] for r in rows)
            return EXIT_OK if worst <= args.sigmas else EXIT_THRESHOLD
    except (ConfigError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProfileError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
