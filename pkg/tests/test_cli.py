import json

import numpy as np
import pytest
import scipy.linalg

from qudit_readout.cli import run
from qudit_readout.io import read_matrix_csv, write_matrix_csv


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_overlaps_default(tmp_path, capsys):
    code, out, _ = call(capsys, "overlaps", "--output-dir", tmp_path)
    assert code == 0
    for name in ("down", "up", "empty"):
        data, labels = read_matrix_csv(tmp_path / f"overlaps_{name}.csv")
        assert data.shape == (8, 8)
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["command"] == "overlaps" and prov["config"]["preset"] == "sb123"
    summary = json.loads(out)["summary"]
    assert summary["max_flip_flop_admixture"] < 1e-4 and summary["flip_flop_below_1e-4"]


def test_overlaps_commuting_limit(tmp_path, capsys):
    code, _, _ = call(capsys, "overlaps", "--A", "0", "--q", "zero", "--output-dir", tmp_path)
    assert code == 0
    for name in ("down", "up", "empty"):
        assert np.array_equal(read_matrix_csv(tmp_path / f"overlaps_{name}.csv")[0], np.eye(8))


def test_transitions_kappa_zero_and_report(tmp_path, capsys):
    code, out, _ = call(capsys, "transitions", "--kappa", "0", "--format", "both", "--output-dir", tmp_path)
    assert code == 0
    assert np.array_equal(read_matrix_csv(tmp_path / "t_qnd.csv")[0], np.eye(8))
    doc = json.loads((tmp_path / "t_qnd.json").read_text())
    assert doc["convention"] == "column-stochastic" and doc["kappa"] == 0.0
    report = json.loads(out)["summary"]["b0_1.395T"]
    assert report["t_couple"]["max_column_sum_deviation"] < 1e-10


def test_transitions_ge_two_fields(tmp_path, capsys):
    code, _, _ = call(capsys, "transitions", "--preset", "ge73", "--b0-tesla", "0.3", "1.0",
                      "--output-dir", tmp_path)
    assert code == 0
    lo = read_matrix_csv(tmp_path / "b0_0.3T_t_qnd.csv")[0]
    hi = read_matrix_csv(tmp_path / "b0_1.0T_t_qnd.csv")[0]
    off = ~np.eye(10, dtype=bool)
    assert lo.shape == (10, 10) and np.all(hi[off] < lo[off])


def test_simulate_rr_curve(tmp_path, capsys):
    code, _, _ = call(capsys, "simulate", "--protocol", "rr", "--n-shots", "1..10", "--n-trials", "2000",
                      "--output-dir", tmp_path)
    assert code == 0
    rows = (tmp_path / "fidelity.csv").read_text().splitlines()
    assert rows[0].startswith("protocol,n_shots") and len(rows) == 11
    assert rows[3].split(",")[6] == "24.0"


def test_simulate_ar_cycles(tmp_path, capsys):
    code, out, _ = call(capsys, "simulate", "--protocol", "ar", "--n-shots", "2", "--n-trials", "20000",
                        "--format", "json", "--output-dir", tmp_path)
    assert code == 0
    res = json.loads((tmp_path / "fidelity.json").read_text())[0]
    assert abs(res["mean_qnd_cycles"] - 6.9) < 0.5
    assert res["seed"] == 0 and res["config"]["kind"] == "ar"


def test_simulate_sweep(tmp_path, capsys):
    code, out, _ = call(capsys, "simulate", "--sweep", "ancilla", "--ancilla-fidelities", "0.9..1.0:0.1",
                        "--n-shots", "1..3", "--n-trials", "500", "--output-dir", tmp_path)
    assert code == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2 * 3
    assert sum(r.endswith("true") for r in rows) == 4


def test_simulate_with_matrix_file(tmp_path, capsys):
    write_matrix_csv(tmp_path / "eye.csv", np.eye(8), [3.5 - k for k in range(8)])
    code, out, _ = call(capsys, "simulate", "--t-cycle", tmp_path / "eye.csv", "--p-tp", "1", "--p-fp", "0",
                        "--n-trials", "100", "--output-dir", tmp_path / "o")
    assert code == 0
    summary = json.loads(out)["summary"]
    assert summary["rr_n3"]["fidelity"] == 1.0 and summary["ar_n3"]["fidelity"] == 1.0


def test_deterministic_outputs(tmp_path, capsys):
    for d in ("a", "b"):
        assert call(capsys, "simulate", "--n-trials", "300", "--seed", "5", "--format", "both",
                    "--output-dir", tmp_path)[0] == 0
        (tmp_path / "fidelity.json").rename(tmp_path / f"{d}.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_extract_generator_identity_and_roundtrip(tmp_path, capsys):
    labels = [4.5 - k for k in range(10)]
    write_matrix_csv(tmp_path / "eye.csv", np.eye(10), labels)
    assert call(capsys, "extract-generator", "--input", tmp_path / "eye.csv", "--output-dir", tmp_path / "e")[0] == 0
    assert np.abs(read_matrix_csv(tmp_path / "e" / "generator.csv")[0]).max() == 0.0

    rng = np.random.default_rng(0)
    g0 = rng.random((10, 10)) * 1e-4
    np.fill_diagonal(g0, 0)
    g0 -= np.diag(g0.sum(axis=0))
    t_obs = scipy.linalg.expm(201 * g0)
    write_matrix_csv(tmp_path / "obs.csv", t_obs, labels)
    assert call(capsys, "extract-generator", "--input", tmp_path / "obs.csv", "--output-dir", tmp_path / "g")[0] == 0
    bare = read_matrix_csv(tmp_path / "g" / "bare_matrix.csv")[0]
    assert np.abs(np.linalg.matrix_power(bare, 201) - t_obs).max() < 1e-6


def test_extract_generator_non_embeddable(tmp_path, capsys):
    write_matrix_csv(tmp_path / "neg.csv", np.array([[0.4, 0.6], [0.6, 0.4]]), [0.5, -0.5])
    code, _, err = call(capsys, "extract-generator", "--input", tmp_path / "neg.csv", "--output-dir", tmp_path)
    assert code == 3
    msg = json.loads(err)
    assert msg["error"] == "NonEmbeddableError" and msg["exit_code"] == 3


def test_synth_and_fit(tmp_path, capsys):
    assert call(capsys, "synth-spectra", "--angles-deg", "0..180:10", "--output-dir", tmp_path)[0] == 0
    code, out, _ = call(capsys, "fit-quadrupole", "--input", tmp_path / "spectra.csv", "--output-dir", tmp_path)
    assert code == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["tensor"]["qxy_khz"] == pytest.approx(-30.48, abs=1e-6)
    assert len(fit["tensor"]["matrix_khz"]) == 3 and len(fit["covariance_khz2"]) == 5
    assert "residual_rms_khz" in fit


def test_fit_single_angle_fails(tmp_path, capsys):
    call(capsys, "synth-spectra", "--angles-deg", "10", "--output-dir", tmp_path)
    code, _, err = call(capsys, "fit-quadrupole", "--input", tmp_path / "spectra.csv", "--output-dir", tmp_path)
    assert code == 3 and json.loads(err)["error"] == "RankDeficientError"


@pytest.mark.parametrize("argv", [
    ["simulate", "--bogus", "1"],
    ["simulate", "--n-shots", "0"],
    ["simulate", "--format", "xml"],
    ["fit-quadrupole", "--input", "/nonexistent.csv"],
    ["frobnicate"],
])
def test_config_errors(tmp_path, capsys, argv):
    code, _, err = call(capsys, *argv, "--output-dir", tmp_path) if argv[0] != "frobnicate" else call(capsys, *argv)
    assert code == 2
    assert json.loads(err)["exit_code"] == 2


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("protocol = rr\nn_shots = 2\nn_trials = 100\nseed = 9\n")
    code, out, _ = call(capsys, "simulate", "--config", cfg, "--n-shots", "4", "--output-dir", tmp_path)
    assert code == 0
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["config"]["n_shots"] == [4] and prov["config"]["seed"] == 9
    cfg.write_text("n_trails = 100\n")
    assert call(capsys, "simulate", "--config", cfg, "--output-dir", tmp_path)[0] == 2
