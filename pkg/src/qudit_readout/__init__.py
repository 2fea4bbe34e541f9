"""Measurement-induced spin flips and QND readout protocols for high-spin donor nuclei.

The package models a nuclear qudit read out through a hyperfine-coupled
electron ancilla: eigenstate overlaps and the resulting flip-probability
matrices, Monte-Carlo simulation of repeated and adaptive readout, jump-trace
analysis, and quadrupole-tensor fitting from NMR spectra.
"""

__version__ = "0.1.0"

from .spin import (  # noqa: E402
    ClassificationError,
    PhysicalParams,
    QuadrupoleTensor,
    SpinQuantum,
    build_extended_hamiltonian,
    make_spin_operators,
)
from .transitions import (  # noqa: E402
    GeneratorMatrix,
    NonEmbeddableError,
    TransitionMatrix,
    extract_generator,
    fractional_power,
    t_qnd,
)
from .protocols import AncillaModel, ProtocolConfig, SimResult, simulate_ar, simulate_rr  # noqa: E402
from .traces import extract_transition_matrix, generate_jump_trace, majority_filter  # noqa: E402
from .nmr import fit_quadrupole, nmr_frequencies, splittings, synth_spectra  # noqa: E402

__all__ = [
    "__version__",
    "ClassificationError",
    "PhysicalParams",
    "QuadrupoleTensor",
    "SpinQuantum",
    "build_extended_hamiltonian",
    "make_spin_operators",
    "GeneratorMatrix",
    "NonEmbeddableError",
    "TransitionMatrix",
    "extract_generator",
    "fractional_power",
    "t_qnd",
    "AncillaModel",
    "ProtocolConfig",
    "SimResult",
    "simulate_ar",
    "simulate_rr",
    "extract_transition_matrix",
    "generate_jump_trace",
    "majority_filter",
    "fit_quadrupole",
    "nmr_frequencies",
    "splittings",
    "synth_spectra",
]
