"""Command-line interface.

Every command resolves its settings (preset < config file < flags), writes
its tables into ``output_dir`` together with ``provenance.json`` and prints a
JSON summary on stdout. Failures print a JSON error on stderr and exit with
2 (configuration) or 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    Option,
    RunConfig,
    PRESETS,
    choice,
    parse_bool,
    parse_float,
    parse_float_list,
    parse_int,
    parse_int_list,
    parse_q,
    parse_seed,
    parse_spin,
    read_config_file,
    resolve,
    text,
)
from .io import (
    jsonable,
    matrix_document,
    read_matrix,
    read_spectra_csv,
    write_json,
    write_matrix_csv,
    write_spectra_csv,
    write_table_csv,
)
from .nmr import FitError, LevelTrackingError, fit_quadrupole, splittings, synth_spectra
from .protocols import AncillaModel, ProtocolConfig, ancilla_sweep, simulate
from .spin import (
    ClassificationError,
    build_extended_hamiltonian,
    decoupled_overlaps,
    flip_flop_admixture,
    overlap_matrices,
)
from .transitions import (
    NonEmbeddableError,
    StochasticityError,
    TransitionMatrix,
    bare_matrix,
    extract_generator,
    model_matrices,
)

log = logging.getLogger("qudit_readout")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NonEmbeddableError, StochasticityError, FitError, LevelTrackingError,
                    ClassificationError, np.linalg.LinAlgError, ArithmeticError)


def _positive(parse: Callable[[str], Any], strict: bool = True) -> Callable[[str], Any]:
    def check(s: str) -> Any:
        v = parse(s)
        if (v <= 0) if strict else (v < 0):
            raise ConfigError(f"must be {'positive' if strict else 'non-negative'}, got {v}")
        return v

    return check


def _probability(s: str) -> float:
    v = parse_float(s)
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"probability must lie in [0, 1], got {v}")
    return v


def _threshold(s: str) -> str | int:
    t = str(s).strip().lower()
    return "auto" if t == "auto" else _positive(parse_int)(t)


COMMON = [
    Option("preset", choice(*PRESETS), "parameter preset (sb123 | ge73)"),
    Option("seed", parse_seed, "64-bit unsigned seed"),
    Option("output_dir", text, "directory for output files"),
    Option("format", choice("csv", "json", "both"), "table format"),
    Option("threads", _positive(parse_int), "worker threads for Monte-Carlo runs"),
]
PHYSICS = [
    Option("spin", parse_spin, "nuclear spin I, e.g. 7/2"),
    Option("b0_tesla", _positive(parse_float), "static field [T]"),
    Option("gamma_n_khz_per_tesla", parse_float, "nuclear gyromagnetic ratio [kHz/T]"),
    Option("gamma_e_khz_per_tesla", parse_float, "electron gyromagnetic ratio [kHz/T]"),
    Option("hyperfine_khz", parse_float, "contact hyperfine coupling A [kHz]", aliases=("--A",)),
    Option("theta_deg", parse_float, "field angle in the zx-plane [deg]"),
    Option("q", parse_q, "quadrupole tensor: zero | preset | qxx qyy qyz qxz qxy [kHz]", nargs="+"),
]
CYCLE = [
    Option("kappa", _positive(parse_float, strict=False), "tunnel events per QND cycle"),
    Option("order", choice("couple_first", "decouple_first"), "order of the in-out compound"),
]
DEFAULTS_COMMON = dict(seed=0, output_dir="out", format="csv", threads=1)


def _with(*groups: Sequence[Option], replace: dict[str, Option] | None = None) -> dict[str, Option]:
    opts = {o.key: o for g in groups for o in g}
    opts.update(replace or {})
    return opts


def _write_matrix(cfg: RunConfig, stem: str, data: np.ndarray, labels, kappa=None,
                  provenance: dict | None = None, convention: str = "column-stochastic") -> list[str]:
    out = []
    if "csv" in cfg.formats:
        out.append(write_matrix_csv(cfg.output_dir / f"{stem}.csv", data, labels).name)
    if "json" in cfg.formats:
        doc = matrix_document(data, labels, kappa, provenance, convention)
        out.append(write_json(cfg.output_dir / f"{stem}.json", doc).name)
    return out


def _stochasticity(t: TransitionMatrix) -> dict:
    return {
        "max_column_sum_deviation": float(np.abs(t.data.sum(axis=0) - 1.0).max()),
        "min_entry": float(t.data.min()),
        "flip_probabilities": t.flip_probabilities,
    }


def cmd_overlaps(cfg: RunConfig) -> tuple[list[str], dict]:
    es = build_extended_hamiltonian(cfg.physical(), cfg.tensor(), cfg.spin_quantum())
    labels = es.sq.m_values
    files = []
    for name, mat in zip(("down", "up", "empty"), overlap_matrices(es)):
        files += _write_matrix(cfg, f"overlaps_{name}", mat, labels, convention="row-eigenstate")
    diag_c, diag_d = decoupled_overlaps(es)
    admix = flip_flop_admixture(es)
    summary = {
        "max_flip_flop_admixture": admix,
        "flip_flop_below_1e-4": admix < 1e-4,
        "coupling_overlap_diagonal": diag_c,
        "decoupling_overlap_diagonal": diag_d,
    }
    files.append(write_json(cfg.output_dir / "summary.json", summary).name)
    return files, summary


def cmd_transitions(cfg: RunConfig) -> tuple[list[str], dict]:
    sq, q = cfg.spin_quantum(), cfg.tensor()
    fields = cfg["b0_tesla"]
    fields = list(fields) if isinstance(fields, (list, tuple)) else [fields]
    files, summary = [], {}
    for b0 in fields:
        mats = model_matrices(cfg.physical(b0), q, sq, cfg["kappa"], cfg["order"])
        prefix = f"b0_{b0!r}T_" if len(fields) > 1 else ""
        report = {}
        for name, t in mats.items():
            kappa = cfg["kappa"] if name == "t_qnd" else None
            files += _write_matrix(cfg, prefix + name, t.data, t.labels, kappa,
                                   {"b0_tesla": b0, **t.provenance})
            report[name] = _stochasticity(t)
        report["t_qnd"]["delta_m_1_band"] = mats["t_qnd"].band(1)
        report["t_qnd"]["delta_m_2_band"] = mats["t_qnd"].band(2)
        summary[f"b0_{b0!r}T"] = report
    files.append(write_json(cfg.output_dir / "summary.json", summary).name)
    return files, summary


def _t_cycle(cfg: RunConfig) -> TransitionMatrix:
    if cfg["t_cycle"] != "model":
        path = Path(cfg["t_cycle"])
        if not path.is_file():
            raise ConfigError(f"t_cycle file not found: {path}")
        return read_matrix(path)
    b0 = cfg["b0_tesla"][0] if isinstance(cfg["b0_tesla"], list) else cfg["b0_tesla"]
    return model_matrices(cfg.physical(b0), cfg.tensor(), cfg.spin_quantum(),
                          cfg["kappa"], cfg["order"])["t_qnd"]


def _protocol_configs(cfg: RunConfig) -> list[ProtocolConfig]:
    kinds = ("rr", "ar") if cfg["protocol"] == "both" else (cfg["protocol"],)
    out = []
    for kind in kinds:
        for n in cfg["n_shots"]:
            try:
                out.append(ProtocolConfig(
                    kind, n,
                    threshold=None if cfg["threshold"] == "auto" else cfg["threshold"],
                    init_policy=None if cfg["init_policy"] == "default" else cfg["init_policy"],
                    kappa=cfg["kappa"],
                    max_restarts=cfg["max_restarts"],
                ))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    return out


SIM_HEADER = ("protocol", "n_shots", "p_tp", "p_fp", "fidelity", "stderr", "mean_qnd_cycles",
              "rejection_rate", "mean_subroutine1_length", "restarts_exhausted")
SWEEP_HEADER = ("ancilla_fidelity", "protocol", "n_shots", "fidelity", "stderr",
                "mean_qnd_cycles", "rejection_rate", "optimal")


def cmd_simulate(cfg: RunConfig) -> tuple[list[str], dict]:
    t = _t_cycle(cfg)
    configs = _protocol_configs(cfg)
    n, seed, workers = cfg["n_trials"], cfg["seed"], cfg["threads"]
    files = []
    if cfg["sweep"] == "ancilla":
        grid = cfg["ancilla_fidelities"]
        try:
            rows = ancilla_sweep(t, configs, grid, n, seed, cfg["fp_ratio"], cfg["fp_tunnel_prob"], workers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        table = [(r.ancilla_fidelity, r.protocol, r.n_shots, r.fidelity, r.stderr,
                  r.mean_qnd_cycles, r.rejection_rate, r.optimal) for r in rows]
        if "csv" in cfg.formats:
            files.append(write_table_csv(cfg.output_dir / "sweep.csv", SWEEP_HEADER, table).name)
        if "json" in cfg.formats:
            files.append(write_json(cfg.output_dir / "sweep.json",
                                    [dict(zip(SWEEP_HEADER, row)) for row in table]).name)
        optimal = {f"{r.protocol}@{r.ancilla_fidelity!r}": r.n_shots for r in rows if r.optimal}
        return files, {"optimal_n_shots": optimal, "rows": len(rows)}

    anc = AncillaModel(cfg["p_tp"], cfg["p_fp"], cfg["fp_tunnel_prob"])
    results = [simulate(t, anc, c, n, seed, workers) for c in configs]
    table = [(r.config.kind, r.config.n_shots, anc.p_tp, anc.p_fp, r.fidelity_avg, r.fidelity_stderr,
              r.mean_qnd_cycles, r.rejection_rate, r.mean_subroutine1_length, r.restarts_exhausted)
             for r in results]
    if "csv" in cfg.formats:
        files.append(write_table_csv(cfg.output_dir / "fidelity.csv", SIM_HEADER, table).name)
    if "json" in cfg.formats:
        files.append(write_json(cfg.output_dir / "fidelity.json", [r.to_dict() for r in results]).name)
    summary = {f"{r.config.kind}_n{r.config.n_shots}": {
        "fidelity": r.fidelity_avg, "stderr": r.fidelity_stderr,
        "mean_qnd_cycles": r.mean_qnd_cycles, "rejection_rate": r.rejection_rate,
    } for r in results}
    return files, summary


def cmd_extract_generator(cfg: RunConfig) -> tuple[list[str], dict]:
    path = Path(cfg["input"])
    if not path.is_file():
        raise ConfigError(f"input matrix not found: {path}")
    try:
        t_obs = read_matrix(path)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, StochasticityError):
            raise
        raise ConfigError(f"cannot read input matrix: {exc}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        g = extract_generator(t_obs, cfg["n_tunnel"])
    bare = bare_matrix(g)
    files = _write_matrix(cfg, "generator", g.data, g.labels, convention="column-generator",
                          provenance={"n_tunnel": g.n_tunnel})
    files += _write_matrix(cfg, "bare_matrix", bare.data, bare.labels,
                           provenance={"n_tunnel": g.n_tunnel})
    summary = {
        "n_tunnel": g.n_tunnel,
        "round_trip_error": g.round_trip_error,
        "regularized_mass": g.regularized_mass,
        "heavily_regularized": g.heavily_regularized,
        "warnings": [str(w.message) for w in caught],
    }
    files.append(write_json(cfg.output_dir / "summary.json", summary).name)
    return files, summary


def _tensor_record(q) -> dict:
    rec = {f"{k}_khz": v for k, v in zip(q.PARAM_NAMES, q.params)}
    rec["qzz_khz"] = q.qzz
    rec["matrix_khz"] = q.matrix
    return rec


def cmd_fit_quadrupole(cfg: RunConfig) -> tuple[list[str], dict]:
    path = Path(cfg["input"])
    if not path.is_file():
        raise ConfigError(f"spectra file not found: {path}")
    try:
        data = read_spectra_csv(path, cfg["charge_state"])
    except ValueError as exc:
        raise ConfigError(f"cannot read spectra: {exc}") from None
    init = cfg.tensor("init")
    fit = fit_quadrupole(data, cfg.physical(), init=init, fit_larmor=cfg["fit_larmor"],
                         max_iterations=cfg["max_iterations"])
    q = fit.tensor
    doc = {
        "tensor": _tensor_record(q),
        "std_errors_khz": dict(zip(q.PARAM_NAMES, fit.std_errors)),
        "covariance_khz2": fit.covariance,
        "parameter_order": list(q.PARAM_NAMES),
        "residual_rms_khz": fit.residual_rms,
        "chi2": fit.chi2,
        "n_points": fit.n_points,
        "n_function_evaluations": fit.n_iterations,
        "larmor_khz": fit.larmor,
        "larmor_std_error_khz": fit.larmor_std_error,
        "mirror_tensor": _tensor_record(fit.mirror),
        "sign_convention": "H = -gamma_n B0 (cos theta Iz + sin theta Ix) + I.Q.I; frequencies are |E(m-1) - E(m)|",
    }
    files = [write_json(cfg.output_dir / "fit.json", doc).name]
    if "csv" in cfg.formats:
        rows = [(name, v, e) for name, v, e in zip(q.PARAM_NAMES, q.params, fit.std_errors)]
        files.append(write_table_csv(cfg.output_dir / "fit.csv", ("parameter", "value_khz", "std_error_khz"), rows).name)
    return files, {"params_khz": dict(zip(q.PARAM_NAMES, q.params)),
                   "std_errors_khz": dict(zip(q.PARAM_NAMES, fit.std_errors)),
                   "residual_rms_khz": fit.residual_rms}


def cmd_synth_spectra(cfg: RunConfig) -> tuple[list[str], dict]:
    angles = np.deg2rad(cfg["angles_deg"])
    spectra = synth_spectra(cfg.physical(), cfg.tensor(), cfg.spin_quantum(), angles,
                            cfg["noise_sigma_khz"], cfg["seed"], cfg["charge_state"])
    files = [write_spectra_csv(cfg.output_dir / "spectra.csv", spectra).name]
    summary = {"n_angles": int(angles.size), "n_transitions": spectra.freqs.shape[1]}
    if spectra.freqs.shape[1] >= 3:
        fq1, fq2 = splittings(spectra.freqs[0])
        summary.update(f_q1_khz_first_angle=fq1, f_q2_khz_first_angle=fq2)
    return files, summary


COMMANDS: dict[str, tuple[Callable, dict[str, Option], dict[str, Any], str]] = {
    "overlaps": (
        cmd_overlaps, _with(COMMON, PHYSICS), DEFAULTS_COMMON,
        "overlap matrices of coupled and decoupled eigenstates",
    ),
    "transitions": (
        cmd_transitions,
        _with(COMMON, PHYSICS, CYCLE, replace={
            "b0_tesla": Option("b0_tesla", parse_float_list, "static field(s) [T]", nargs="+")}),
        {**DEFAULTS_COMMON, "order": "couple_first"},
        "coupling, decoupling, in-out and per-cycle transition matrices",
    ),
    "simulate": (
        cmd_simulate,
        _with(COMMON, PHYSICS, CYCLE, [
            Option("protocol", choice("rr", "ar", "both"), "readout protocol"),
            Option("n_shots", parse_int_list, "shots per protocol, e.g. 1..10", nargs="+"),
            Option("n_trials", _positive(parse_int), "Monte-Carlo trials per point"),
            Option("p_tp", _probability, "ancilla true-positive probability"),
            Option("p_fp", _probability, "ancilla false-positive probability"),
            Option("fp_tunnel_prob", _probability, "probability a dark count is a real tunnel event"),
            Option("init_policy", choice("default", "per_cycle", "on_demand"), "when the nucleus is perturbed"),
            Option("threshold", _threshold, "AR rejection threshold (auto = ceil(n/2))"),
            Option("max_restarts", _positive(parse_int, strict=False), "AR restart limit"),
            Option("sweep", choice("none", "ancilla"), "run an ancilla-fidelity sweep"),
            Option("ancilla_fidelities", parse_float_list, "sweep grid, e.g. 0.85..1.0:0.05", nargs="+"),
            Option("fp_ratio", _positive(parse_float, strict=False), "p_fp / (1 - F) in sweeps"),
            Option("t_cycle", text, "per-cycle matrix file (CSV/JSON) or 'model'"),
        ]),
        {**DEFAULTS_COMMON, "order": "couple_first", "protocol": "both", "n_shots": [3],
         "n_trials": 100000, "p_tp": 0.968, "p_fp": 0.019, "fp_tunnel_prob": 0.0,
         "init_policy": "default", "threshold": "auto", "max_restarts": 10, "sweep": "none",
         "ancilla_fidelities": [0.85, 0.9, 0.95, 0.99], "fp_ratio": 0.594, "t_cycle": "model"},
        "Monte-Carlo readout fidelity of repeated and adaptive protocols",
    ),
    "extract-generator": (
        cmd_extract_generator,
        _with(COMMON, [
            Option("input", text, "compounded transition matrix (CSV or JSON)"),
            Option("n_tunnel", _positive(parse_float), "tunnel events in the input matrix"),
        ]),
        {**DEFAULTS_COMMON, "n_tunnel": 201.0},
        "per-event generator and bare matrix from a compounded matrix",
    ),
    "fit-quadrupole": (
        cmd_fit_quadrupole,
        _with(COMMON, PHYSICS, [
            Option("input", text, "spectra CSV (theta_deg, transition_index, freq_khz, sigma_khz)"),
            Option("charge_state", choice("ionized", "neutral"), "donor charge state of the spectra"),
            Option("init", parse_q, "starting tensor: zero | preset | five numbers", nargs="+"),
            Option("fit_larmor", parse_bool, "also fit the nuclear Larmor frequency"),
            Option("max_iterations", _positive(parse_int), "optimizer evaluation budget"),
        ]),
        {**DEFAULTS_COMMON, "charge_state": "ionized", "init": "zero", "fit_larmor": False,
         "max_iterations": 200},
        "fit the quadrupole tensor to angle-dependent NMR spectra",
    ),
    "synth-spectra": (
        cmd_synth_spectra,
        _with(COMMON, PHYSICS, [
            Option("angles_deg", parse_float_list, "field angles, e.g. 0..90:5", nargs="+"),
            Option("noise_sigma_khz", _positive(parse_float, strict=False), "Gaussian noise [kHz]"),
            Option("charge_state", choice("ionized", "neutral"), "donor charge state"),
        ]),
        {**DEFAULTS_COMMON, "angles_deg": [5.0 * k for k in range(19)], "noise_sigma_khz": 0.0,
         "charge_state": "ionized"},
        "synthetic NMR spectra from the forward model",
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qudit-readout", description="QND readout modelling of high-spin donor nuclei.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, options, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        for opt in options.values():
            flags = ["--" + opt.key.replace("_", "-"), *opt.aliases]
            p.add_argument(*flags, dest=opt.key, nargs=opt.nargs, default=argparse.SUPPRESS,
                           metavar=opt.key.upper(), help=opt.help)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
           "category": "config" if code == EXIT_CONFIG else "numerical"}
    print(json.dumps(err), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        handler, options, defaults, _ = COMMANDS[args.command]
        flags = {k: v for k, v in vars(args).items() if k in options}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, options, defaults, file_values, flags)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        files, summary = handler(cfg)
        prov = {
            "artifact": "qudit-readout",
            "version": __version__,
            "command": cfg.command,
            "config": cfg.values,
            "outputs": sorted(files),
        }
        write_json(cfg.output_dir / "provenance.json", prov)
        print(json.dumps(jsonable({"command": cfg.command, "outputs": sorted(files), "summary": summary})))
        return EXIT_OK
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except NUMERICAL_ERRORS as exc:
        return _fail(exc, EXIT_NUMERICAL)
    except OSError as exc:
        return _fail(exc, EXIT_CONFIG)


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
