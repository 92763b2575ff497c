import csv
import json
import subprocess
import sys

import pytest

from sepcross import __version__
from sepcross.cli import main

MODEL_TOML = """\
[model]
name = "duffing_dissipative"

[params]
gamma = 1.0
"""


@pytest.fixture()
def model_file(tmp_path):
    path = tmp_path / "duffing.toml"
    path.write_text(MODEL_TOML)
    return path


def test_coeffs_happy_path(tmp_path, model_file, capsys):
    out = tmp_path / "coeffs.json"
    rc = main(["coeffs", "--model", str(model_file), "--z", "0.0",
               "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["version"] == __version__
    assert doc["config"]["model"] == str(model_file)
    assert doc["coeffs"]["theta"][2] == pytest.approx(8.0 / 3.0, abs=1e-6)
    status = json.loads(capsys.readouterr().out)
    assert status["ok"] and str(out) in status["outputs"]


def test_missing_model_file_exit_2(capsys):
    rc = main(["coeffs", "--model", "/nowhere/missing.toml"])
    assert rc == 2
    err = json.loads(capsys.readouterr().out)
    assert err["error"] == "config"
    assert "/nowhere/missing.toml" in err["message"]


def test_unknown_model_exit_2(capsys):
    rc = main(["coeffs", "--model", "not_a_model"])
    assert rc == 2


def test_bad_z_exit_2(tmp_path, model_file, capsys):
    rc = main(["coeffs", "--model", str(model_file), "--z", "1,2",
               "--out", str(tmp_path / "x.json")])
    assert rc == 2
    assert "dim_z" in json.loads(capsys.readouterr().out)["message"]


def test_predict(tmp_path, capsys):
    out = tmp_path / "pred.json"
    rc = main(["predict", "--model", "duffing_dissipative", "--eps", "1e-3",
               "--target", "2", "--xi", "0.5", "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["jump"]["dtau"] == pytest.approx(-1e-3 * 0.6931, abs=1e-5)
    assert set(doc["jump"]["terms"]) >= {"tau_log", "tau_gamma", "tau_b",
                                         "tau_d"}


def test_sweep_rows_and_rerun_identical(tmp_path, model_file, capsys):
    out1 = tmp_path / "s1.csv"
    out2 = tmp_path / "s2.csv"
    for out in (out1, out2):
        rc = main(["sweep", "--model", str(model_file), "--eps", "1e-2",
                   "--phases", "2", "--out", str(out)])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()
    with open(out1) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert [r["run_id"] for r in rows] == ["0", "1"]
    for col in ("run_id", "eps", "phi0", "xi3", "xi_i", "target",
                "measured_jump", "predicted_jump", "valid", "error"):
        assert col in rows[0]
    sidecar = json.loads((tmp_path / "s1.json").read_text())
    assert sidecar["config"]["eps"] == [1e-2]
    assert sidecar["rows"] == 2
    curve = list(csv.DictReader(open(tmp_path / "s1_curve.csv")))
    assert len(curve) == 2 * 512  # both targets


def test_capture_phase_guard(capsys):
    rc = main(["capture", "--model", "duffing_dissipative", "--eps", "1e-2",
               "--phases", "10"])
    assert rc == 2


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "sepcross.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("portrait", "coeffs", "predict", "simulate", "sweep",
                "capture"):
        assert sub in proc.stdout


def test_console_script_version():
    proc = subprocess.run(["sepcross", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert __version__ in proc.stdout
