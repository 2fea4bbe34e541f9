"""CSV and JSON serialization of matrices, spectra and result tables.

Floats are written with ``repr`` (shortest round-tripping form), so files
are byte-identical across runs and reload without loss.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .nmr import NmrSpectrumSet
from .traces import JumpTrace
from .transitions import TransitionMatrix

__all__ = [
    "format_label",
    "write_matrix_csv",
    "read_matrix_csv",
    "matrix_document",
    "read_matrix",
    "write_json",
    "write_table_csv",
    "write_spectra_csv",
    "read_spectra_csv",
    "jsonable",
    "write_trace_csv",
]

CONVENTION = "column-stochastic"
SPECTRA_HEADER = ("theta_deg", "transition_index", "freq_khz", "sigma_khz")


def format_label(m: float) -> str:
    return f"{float(m):.1f}"


def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def jsonable(obj: Any) -> Any:
    """Recursively convert numpy types, tuples and non-finite floats for ``json``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(jsonable(obj), indent=2) + "\n", encoding="utf-8")
    return path


def write_table_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_matrix_csv(path: Path, data: np.ndarray, labels: Sequence[float]) -> Path:
    """Row-major matrix with a header row of ``m`` labels."""
    data = np.asarray(data, dtype=float)
    return write_table_csv(path, [format_label(m) for m in labels], data.tolist())


def read_matrix_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: expected a header row and at least one data row")
    try:
        labels = np.array([float(c) for c in rows[0]])
        data = np.array([[float(c) for c in r] for r in rows[1:]])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.shape != (labels.size, labels.size):
        raise ValueError(f"{path}: matrix shape {data.shape} does not match {labels.size} labels")
    return data, labels


def matrix_document(data: np.ndarray, labels: Sequence[float], kappa: float | None = None,
                    provenance: dict | None = None, convention: str = CONVENTION) -> dict:
    doc: dict[str, Any] = {
        "labels": [float(m) for m in labels],
        "convention": convention,
        "data": np.asarray(data, dtype=float).tolist(),
    }
    if kappa is not None:
        doc["kappa"] = float(kappa)
    doc["provenance"] = provenance or {}
    return doc


def read_matrix(path: Path) -> TransitionMatrix:
    """Load a transition matrix from CSV or JSON (by file suffix)."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("convention", CONVENTION) != CONVENTION:
            raise ValueError(f"{path}: unsupported convention {doc.get('convention')!r}")
        return TransitionMatrix(np.asarray(doc["data"], float), labels=doc.get("labels"),
                                kappa=doc.get("kappa"))
    data, labels = read_matrix_csv(path)
    return TransitionMatrix(data, labels=labels)


def write_spectra_csv(path: Path, spectra: NmrSpectrumSet) -> Path:
    rows = []
    for i, theta in enumerate(np.rad2deg(spectra.angles)):
        for j in range(spectra.freqs.shape[1]):
            rows.append((float(theta), j, spectra.freqs[i, j], spectra.sigma[i, j]))
    return write_table_csv(path, SPECTRA_HEADER, rows)


def read_spectra_csv(path: Path, charge_state: str = "ionized") -> NmrSpectrumSet:
    """Long-format spectra table; every angle must list the same transitions."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(SPECTRA_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    by_angle: dict[float, dict[int, tuple[float, float]]] = {}
    for r in rows:
        theta = float(r["theta_deg"])
        by_angle.setdefault(theta, {})[int(r["transition_index"])] = (
            float(r["freq_khz"]), float(r["sigma_khz"]))
    n_tr = {len(v) for v in by_angle.values()}
    if len(n_tr) != 1:
        raise ValueError(f"{path}: angles list different numbers of transitions")
    n = n_tr.pop()
    angles = sorted(by_angle)
    freqs = np.empty((len(angles), n))
    sigma = np.empty_like(freqs)
    for i, theta in enumerate(angles):
        entries = by_angle[theta]
        if sorted(entries) != list(range(n)):
            raise ValueError(f"{path}: transition indices at {theta} deg are not 0..{n - 1}")
        for j in range(n):
            freqs[i, j], sigma[i, j] = entries[j]
    return NmrSpectrumSet(np.deg2rad(angles), freqs, sigma, charge_state)


def write_trace_csv(path: Path, trace: JumpTrace) -> Path:
    """Columns ``block, true_state, assigned_state``; true state is empty when unknown."""
    truth = trace.true_states
    rows = ((b, "" if truth is None else int(truth[b]), int(a)) for b, a in enumerate(trace.assigned))
    return write_table_csv(path, ("block", "true_state", "assigned_state"), rows)
