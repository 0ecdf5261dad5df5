import csv
import io
import json

import numpy as np
import pytest

from geofp8.cli import main
from geofp8.io import write_tensor
from geofp8.linalg import make_rng, spectral_norm_oracle
from geofp8.selftest import corrupted_codec, run_selftest
from geofp8.spectral import AttentionWeights, interaction_matrix


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_calibrate_reference_rows(capsys):
    code, out, _ = run(capsys, "calibrate", "--model", "gpt2-xl")
    doc = json.loads(out)
    assert code == 0
    assert doc["gamma"] == pytest.approx(2.98, abs=0.03)
    assert doc["alpha_min"] == pytest.approx(0.074, abs=0.001)
    assert doc["improvement_rounded"] == 8
    code, out, _ = run(capsys, "calibrate", "--model", "llama2-13b")
    doc = json.loads(out)
    assert doc["gamma"] == pytest.approx(2.28, abs=0.03)
    assert doc["alpha_min"] == pytest.approx(0.028, abs=0.001)
    assert doc["improvement_rounded"] == 18


def test_calibrate_all_csv_and_custom_dims(capsys):
    code, out, _ = run(capsys, "calibrate", "--all", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["model"] for r in rows] == ["gpt2-xl", "mistral-7b", "llama2-13b", "llama2-70b"]
    code, out, _ = run(capsys, "calibrate", "--d", "1600", "--d-h", "64", "--n-layers", "48", "--n-heads", "25")
    assert json.loads(out)["gamma"] == pytest.approx(2.98, abs=0.03)


@pytest.mark.parametrize("argv", [
    ("calibrate", "--model", "gpt2-xl", "--delta-star", "1"),
    ("calibrate", "--model", "bert"),
    ("calibrate", "--d", "64"),
    ("calibrate", "--d", "8", "--d-h", "8", "--n-layers", "1", "--n-heads", "1", "--seq-len", "64"),
])
def test_calibrate_rejects(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "error" in err


def _layer_files(tmp_path, Wq, Wk, tag="0"):
    q, k = tmp_path / f"wq{tag}.gawt", tmp_path / f"wk{tag}.gawt"
    write_tensor(q, Wq)
    write_tensor(k, Wk)
    return str(q), str(k)


def test_spectral_known_sigma(tmp_path, capsys):
    Wq = np.array([[2.0, 0], [0, 1], [0, 0]])
    Wk = np.array([[1.0, 0], [0, 1], [0, 0]])
    q, k = _layer_files(tmp_path, Wq, Wk)
    code, out, _ = run(capsys, "spectral", "--layer", q, k, "--d-h", "2")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 1
    assert float(rows[0]["sigma"]) == pytest.approx(2.0, abs=1e-8)
    assert rows[0]["converged"] == "1"


def test_spectral_gqa_check_explicit(tmp_path, capsys):
    rng = make_rng(0)
    Wq = rng.standard_normal((32, 32)).astype(np.float32)
    Wk = rng.standard_normal((32, 8)).astype(np.float32)
    q, k = _layer_files(tmp_path, Wq, Wk)
    code, out, _ = run(capsys, "spectral", "--layer", q, k, "--d-h", "4", "--n-q", "8", "--n-kv", "2",
                       "--check-explicit", "--tol", "1e-13")
    row = next(csv.DictReader(io.StringIO(out)))
    assert code == 0 and float(row["abs_diff"]) <= 1e-8
    w = AttentionWeights(Wq.astype(float), Wk.astype(float), 4, 8, 2)
    assert float(row["sigma"]) == pytest.approx(spectral_norm_oracle(interaction_matrix(w)), abs=1e-8)


def test_spectral_per_head_and_json(tmp_path, capsys):
    rng = make_rng(1)
    q, k = _layer_files(tmp_path, rng.standard_normal((16, 8)), rng.standard_normal((16, 4)))
    code, out, _ = run(capsys, "spectral", "--layer", q, k, "--d-h", "2", "--per-head", "--format", "json")
    doc = json.loads(out)
    assert code == 0 and [r["head"] for r in doc["rows"]] == [0, 1, 2, 3]


def test_spectral_empty_list(capsys):
    code, out, _ = run(capsys, "spectral", "--d-h", "4")
    assert code == 0 and out == "layer,sigma,iters,converged\n"


def test_spectral_malformed_file(tmp_path, capsys):
    bad = tmp_path / "broken.gawt"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    good = tmp_path / "ok.gawt"
    write_tensor(good, np.ones((4, 2)))
    code, _, err = run(capsys, "spectral", "--layer", str(bad), str(good), "--d-h", "2")
    assert code == 2 and "broken.gawt" in err


def test_simulate_deterministic_and_reports_overflow(tmp_path, capsys):
    args = ("simulate", "--scenario", "weight_spike", "--steps-before", "4", "--steps-after", "2", "--seed", "3")
    code1, out1, _ = run(capsys, *args)
    code2, out2, _ = run(capsys, *args)
    assert code1 == code2 == 0 and out1 == out2
    doc = json.loads(out1)
    assert doc["summary"]["total_overflows_geometry"] == 0
    assert doc["summary"]["total_overflows_delayed"] > 0
    csv1, csv2 = tmp_path / "a.csv", tmp_path / "b.csv"
    run(capsys, *args, "--csv", str(csv1))
    run(capsys, *args, "--csv", str(csv2))
    assert csv1.read_bytes() == csv2.read_bytes()


def test_simulate_config_file_and_auto_alpha(tmp_path, capsys):
    cfgp = tmp_path / "run.json"
    cfgp.write_text(json.dumps({"model": {"d": 64, "d_h": 8, "n_q": 2, "n_kv": 1},
                                "target": {"L": 16},
                                "policy": {"mode": "auto-alpha", "T_calib": 3},
                                "scenario": {"kind": "stationary", "steps_before": 4, "steps_after": 2}}))
    code, out, _ = run(capsys, "simulate", "--config", str(cfgp))
    doc = json.loads(out)
    assert code == 0 and doc["geometry_mode"] == "auto-alpha"
    assert doc["guarantee"].startswith("none")
    assert doc["alpha_final"] is not None


def test_simulate_bad_config(tmp_path, capsys):
    cfgp = tmp_path / "bad.json"
    cfgp.write_text(json.dumps({"model": {"wat": 1}}))
    code, _, err = run(capsys, "simulate", "--config", str(cfgp))
    assert code == 2 and "wat" in err


def test_montecarlo_commands(capsys):
    code, out, _ = run(capsys, "montecarlo", "projection", "--d", "100", "--k", "5", "--trials", "2000")
    doc = json.loads(out)
    assert code == 0 and doc["mean_within_3se"] and doc["tails_within_bound"]
    code, out, _ = run(capsys, "montecarlo", "overflow", "--d", "32", "--d-h", "4", "--seq-len", "8",
                       "--trials", "20", "--alpha", "1.0")
    doc = json.loads(out)
    assert code == 0 and doc["cells"][0]["exceedances"] == 0
    code, _, _ = run(capsys, "montecarlo", "projection", "--trials", "10")
    assert code == 2


def test_selftest_passes_and_detects_fault(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0 and "4/4 checks passed" in out
    code, _, err = run(capsys, "selftest", "--inject-fault", "codec")
    assert code == 1 and "FAIL codec" in err


def test_selftest_api():
    assert all(r.ok for r in run_selftest(seed=5))
    res = {r.name: r.ok for r in run_selftest(codec=corrupted_codec())}
    assert res["codec"] is False and res["adjoint"] is True
