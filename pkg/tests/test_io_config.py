import json

import numpy as np
import pytest

from qudit_readout.config import (
    ConfigError,
    Option,
    parse_float_list,
    parse_int_list,
    parse_q,
    read_config_file,
    resolve,
    choice,
    parse_float,
    text,
)
from qudit_readout.io import (
    jsonable,
    matrix_document,
    read_matrix,
    read_matrix_csv,
    read_spectra_csv,
    write_json,
    write_matrix_csv,
    write_spectra_csv,
    write_trace_csv,
)
from qudit_readout.nmr import NmrSpectrumSet
from qudit_readout.traces import JumpTrace
from qudit_readout.transitions import StochasticityError


class TestMatrixIO:
    def test_csv_roundtrip_exact(self, tmp_path, sb_t_qnd):
        path = write_matrix_csv(tmp_path / "t.csv", sb_t_qnd.data, sb_t_qnd.labels)
        header = path.read_text().splitlines()[0]
        assert header == "3.5,2.5,1.5,0.5,-0.5,-1.5,-2.5,-3.5"
        data, labels = read_matrix_csv(path)
        assert np.array_equal(data, sb_t_qnd.data)
        assert np.array_equal(labels, sb_t_qnd.labels)

    def test_json_document(self, tmp_path, sb_t_qnd):
        doc = matrix_document(sb_t_qnd.data, sb_t_qnd.labels, kappa=4.47, provenance={"a": 1})
        assert doc["convention"] == "column-stochastic" and doc["kappa"] == 4.47
        path = write_json(tmp_path / "t.json", doc)
        t = read_matrix(path)
        assert np.array_equal(t.data, sb_t_qnd.data) and t.kappa == 4.47

    def test_read_rejects_bad_files(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("0.5,-0.5\n0.5,0.5\n")
        with pytest.raises(ValueError):
            read_matrix_csv(p)
        p.write_text("0.5,-0.5\n0.7,0.6\n0.5,0.4\n")
        with pytest.raises(StochasticityError):
            read_matrix(p)
        p.write_text("0.5,-0.5\nx,0.6\n0.5,0.4\n")
        with pytest.raises(ValueError):
            read_matrix_csv(p)
        j = tmp_path / "row.json"
        write_json(j, matrix_document(np.eye(2), [0.5, -0.5], convention="row-stochastic"))
        with pytest.raises(ValueError):
            read_matrix(j)

    def test_jsonable(self):
        out = jsonable({"a": np.arange(2), "b": np.float64("nan"), "c": (np.int64(3), np.bool_(True))})
        assert out == {"a": [0, 1], "b": None, "c": [3, True]}
        json.dumps(out)


class TestSpectraIO:
    def test_roundtrip(self, tmp_path):
        s = NmrSpectrumSet(np.deg2rad([0.0, 10.0]), np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), 0.5)
        path = write_spectra_csv(tmp_path / "s.csv", s)
        assert path.read_text().splitlines()[0] == "theta_deg,transition_index,freq_khz,sigma_khz"
        back = read_spectra_csv(path)
        assert np.allclose(back.angles, s.angles, atol=1e-15)
        assert np.array_equal(back.freqs, s.freqs) and np.array_equal(back.sigma, s.sigma)

    def test_inconsistent_rows(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("theta_deg,transition_index,freq_khz,sigma_khz\n0,0,1,1\n0,1,2,1\n10,0,1,1\n")
        with pytest.raises(ValueError):
            read_spectra_csv(p)
        p.write_text("theta_deg,freq_khz\n0,1\n")
        with pytest.raises(ValueError):
            read_spectra_csv(p)


def test_trace_csv(tmp_path):
    path = write_trace_csv(tmp_path / "tr.csv", JumpTrace(np.array([1, 1, 0]), 2, np.array([1, 0, 0])))
    assert path.read_text().splitlines() == ["block,true_state,assigned_state", "0,1,1", "1,0,1", "2,0,0"]


class TestParsers:
    def test_lists_and_ranges(self):
        assert parse_int_list("1..4") == [1, 2, 3, 4]
        assert parse_int_list("2, 5 7") == [2, 5, 7]
        assert parse_float_list("0.85..1.0:0.05") == [0.85, 0.9, 0.95, 1.0]
        assert parse_float_list("0.3 1.0") == [0.3, 1.0]
        with pytest.raises(ConfigError):
            parse_int_list("4..1")
        with pytest.raises(ConfigError):
            parse_float_list("")

    def test_q(self):
        assert parse_q("zero") == "zero"
        assert parse_q("1 2 3 4 5") == [1.0, 2.0, 3.0, 4.0, 5.0]
        with pytest.raises(ConfigError):
            parse_q("1 2")


class TestResolve:
    OPTS = {o.key: o for o in [
        Option("preset", choice("sb123", "ge73"), ""),
        Option("kappa", parse_float, ""),
        Option("b0_tesla", parse_float, ""),
        Option("name", text, ""),
    ]}

    def test_precedence(self):
        cfg = resolve("x", self.OPTS, {"name": "d"}, {"kappa": "2.0", "name": "file"}, {"name": "flag"})
        assert cfg["kappa"] == 2.0 and cfg["name"] == "flag" and cfg["b0_tesla"] == 1.395
        ge = resolve("x", self.OPTS, {"name": "d"}, {"preset": "ge73"}, {})
        assert ge["b0_tesla"] == 1.0 and ge["kappa"] == 1.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            resolve("x", self.OPTS, {"name": "d"}, {"kapa": "2"}, {})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="kappa"):
            resolve("x", self.OPTS, {"name": "d"}, {}, {"kappa": "abc"})

    def test_config_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nn-trials = 10  # inline\n\nseed=3\n")
        assert read_config_file(p) == {"n_trials": "10", "seed": "3"}
        p.write_text("seed 3\n")
        with pytest.raises(ConfigError):
            read_config_file(p)
        p.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            read_config_file(p)
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "missing.cfg")
