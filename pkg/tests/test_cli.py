import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from selfsim.cli import (EXIT_CONFIG, EXIT_OK, EXIT_THRESHOLD, FIELD_TABLES, load_bundle, main, parse_config,
                         read_manifest)
from selfsim.errors import ConfigError

SMALL = {
    "params": {"d": 3, "a": 0.45, "mu": 0.98, "lambda": 10, "relax": 0.5, "tol": 5e-3, "k_max": 2},
    "grid": {"N_r": 16, "N_z": 16, "r_min": 1e-3, "R_max": 1e3},
    "quadrature": {"mc_samples": 20000, "mc_seed": 3},
    "verify": {"traces": 8, "pairs": 500, "seed": 1},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "run.json", SMALL)
    out = root / "bundle"
    code = main(["solve", cfg, "-o", str(out), "-q"])
    return out, code


def test_missing_a_names_the_key(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    del doc["params"]["a"]
    assert main(["solve", write_config(tmp_path / "c.json", doc), "-q"]) == EXIT_CONFIG
    assert "params.a" in capsys.readouterr().err


def test_bad_values_exit_with_config_code(tmp_path):
    for block, key, value in [("params", "k_max", 0), ("params", "a", 0.2), ("grid", "N_r", 4)]:
        doc = json.loads(json.dumps(SMALL))
        doc[block][key] = value
        assert main(["solve", write_config(tmp_path / f"{key}.json", doc), "-q"]) == EXIT_CONFIG


def test_config_accepts_top_level_params():
    cfg = parse_config({"d": 3, "a": 0.45, "mu": 0.98})
    assert (cfg.d, cfg.a, cfg.mu, cfg.lam, cfg.relax) == (3, 0.45, 0.98, 10.0, 0.5)
    with pytest.raises(ConfigError):
        parse_config({"d": 3, "a": "x", "mu": 0.98})


def test_solve_writes_bundle(bundle):
    out, code = bundle
    assert code in (EXIT_OK, EXIT_THRESHOLD)
    m = read_manifest(out)
    assert m["config"]["params"]["k_max"] == 2
    assert len(m["history"]) == 2
    assert (out / "verification.json").exists()


def test_history_export_columns(bundle, tmp_path):
    out, _ = bundle
    assert main(["export", str(out), "history", "-o", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "change_norm", "M_frak", "M_envelope"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2]


def test_fields_export_five_tables(bundle, tmp_path):
    out, _ = bundle
    assert main(["export", str(out), "fields", "-f", "json", "-o", str(tmp_path)]) == EXIT_OK
    for name in FIELD_TABLES:
        doc = json.loads((tmp_path / f"{name}.json").read_text())
        assert len(doc["rows"]) == 16 * 16
        assert all(len(row) == len(doc["columns"]) for row in doc["rows"])
    assert len(FIELD_TABLES) == 5


def test_unknown_selector(bundle, capsys):
    out, _ = bundle
    assert main(["export", str(out), "vorticity"]) == EXIT_CONFIG
    assert "unknown export selector" in capsys.readouterr().err


def test_kernel_selftest_export(bundle, tmp_path):
    out, _ = bundle
    assert main(["export", str(out), "kernel-selftest", "-o", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "kernel_selftest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert all(float(r["std_error"]) > 0 for r in rows)


def test_verify_reproduces_digest(bundle, capsys):
    out, code = bundle
    assert main(["verify", str(out)]) == code
    assert "stored report reproduced: yes" in capsys.readouterr().out


def test_bundle_round_trip_is_bitwise(bundle):
    out, _ = bundle
    sol, tables, _ = load_bundle(out)
    again, tables2, _ = load_bundle(out)
    for name in tables:
        assert tables[name].tobytes() == tables2[name].tobytes()
    assert np.array_equal(sol.psi.values, tables["psi"])
    assert sol.psi.origin == pytest.approx(0.45, abs=1e-10)


def test_tampered_table_is_rejected(bundle, tmp_path, capsys):
    import shutil
    out, _ = bundle
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    m = read_manifest(copy)
    victim = copy / m["tables"]["psi"]["file"]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0x01
    victim.write_bytes(bytes(raw))
    assert main(["verify", str(copy), "-q"]) == EXIT_CONFIG
    assert "checksum" in capsys.readouterr().err


def test_missing_bundle(tmp_path):
    assert main(["verify", str(tmp_path / "nowhere")]) == EXIT_CONFIG
    assert main(["export", str(tmp_path / "nowhere"), "history"]) == EXIT_CONFIG


def test_trace_subcommand(bundle, tmp_path):
    out, _ = bundle
    dest = tmp_path / "t.csv"
    assert main(["trace", str(out), "--point", "2.0", "3.0", "--point", "0.5", "0.5", "-o", str(dest)]) == EXIT_OK
    with open(dest) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["trace"] for r in rows} == {"0", "1"}
    h = np.array([float(r["h"]) for r in rows])
    assert np.all((h > 0.0125) & (h < 1))
    assert main(["trace", str(out)]) == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "selfsim.cli", "kernel-selftest", "--pairs", "2",
                          "--samples", "20000", "-f", "json"], capture_output=True, text=True, timeout=300)
    assert res.returncode in (EXIT_OK, EXIT_THRESHOLD)
    doc = json.loads(res.stdout)
    assert len(doc["rows"]) == 2
    assert set(doc["columns"]) >= {"quadrature", "monte_carlo", "z_score"}
